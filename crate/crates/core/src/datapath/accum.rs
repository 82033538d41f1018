//! Accumulation buffer: exact partial sums for the output tile of one
//! feature group.

use crate::fxp::{acc_add, quantize, Acc48, AccOverflow, Fx16};

#[derive(Debug, Clone, Default)]
pub struct AccumBuffer {
    features: usize,
    h: usize,
    w: usize,
    sums: Vec<Acc48>,
    channels_done: Vec<usize>,
    finalized: Vec<bool>,
}

impl AccumBuffer {
    /// Start a tile: every partial sum is seeded with its feature's bias.
    pub fn reset(&mut self, biases: &[Fx16], h: usize, w: usize) {
        self.features = biases.len();
        self.h = h;
        self.w = w;
        self.sums.clear();
        for &b in biases {
            self.sums.extend(std::iter::repeat_n(Acc48::from_fx(b), h * w));
        }
        self.channels_done = vec![0; self.features];
        self.finalized = vec![false; self.features];
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn add(&mut self, feature: usize, y: usize, x: usize, v: Acc48) -> Result<(), AccOverflow> {
        debug_assert!(!self.finalized[feature]);
        let i = (feature * self.h + y) * self.w + x;
        self.sums[i] = acc_add(self.sums[i], v)?;
        Ok(())
    }

    pub fn get(&self, feature: usize, y: usize, x: usize) -> Acc48 {
        self.sums[(feature * self.h + y) * self.w + x]
    }

    /// Record that `feature` has received every sub-kernel pass of one more
    /// input channel; returns the new count.
    pub fn channel_done(&mut self, feature: usize) -> usize {
        self.channels_done[feature] += 1;
        self.channels_done[feature]
    }

    pub fn channels_done(&self, feature: usize) -> usize {
        self.channels_done[feature]
    }

    pub fn is_finalized(&self, feature: usize) -> bool {
        self.finalized[feature]
    }

    /// Quantize one feature's plane. Only valid once all its channels are in.
    pub fn finalize(&mut self, feature: usize) -> Vec<Fx16> {
        self.finalized[feature] = true;
        let plane = self.h * self.w;
        self.sums[feature * plane..(feature + 1) * plane]
            .iter()
            .map(|&a| quantize(a))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::{fx_mul, to_fx};

    #[test]
    fn bias_seeded_and_quantized_once() {
        let mut acc = AccumBuffer::default();
        acc.reset(&[to_fx(1.0), to_fx(-2.0)], 2, 3);
        acc.add(0, 1, 2, fx_mul(to_fx(0.5), to_fx(0.5))).unwrap();
        assert_eq!(acc.get(1, 0, 0), Acc48::from_fx(to_fx(-2.0)));
        assert_eq!(acc.channel_done(0), 1);
        let plane = acc.finalize(0);
        assert_eq!(plane.len(), 6);
        assert_eq!(plane[5], to_fx(1.25));
        assert_eq!(plane[0], to_fx(1.0));
        assert!(acc.is_finalized(0) && !acc.is_finalized(1));
    }
}
