//! Convolution units: nine multiplier PEs and an adder each, sixteen per
//! array.

use serde::{Deserialize, Serialize};

use crate::fxp::{fx_mul, Fx16};

use super::colbuf::WINDOW;

pub const PES_PER_CU: usize = WINDOW * WINDOW;
pub const CU_COUNT: usize = 16;
/// Peak multiply-accumulates per cycle.
pub const PEAK_MACS_PER_CYCLE: u64 = (CU_COUNT * PES_PER_CU) as u64;

/// How the sixteen CUs are shared between output features (`features`)
/// and adjacent window columns (`columns`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CuMapping {
    pub features: usize,
    pub columns: usize,
}

impl CuMapping {
    pub fn new(features: usize, columns: usize) -> Result<Self, String> {
        if features == 0 || columns == 0 || features * columns != CU_COUNT {
            return Err(format!(
                "mapping {features}x{columns} does not use exactly {CU_COUNT} CUs"
            ));
        }
        Ok(CuMapping { features, columns })
    }
}

impl Default for CuMapping {
    fn default() -> Self {
        CuMapping {
            features: 2,
            columns: 8,
        }
    }
}

/// EN_Ctrl mask of the PEs that hold real weights for sub-kernel
/// `(sy, sx)` of a `kernel`-wide filter. Bit `i*3 + j` enables PE `(i, j)`.
pub fn subkernel_mask(kernel: usize, sy: usize, sx: usize) -> u16 {
    let rows = kernel.saturating_sub(sy * WINDOW).min(WINDOW);
    let cols = kernel.saturating_sub(sx * WINDOW).min(WINDOW);
    let mut mask = 0u16;
    for i in 0..rows {
        for j in 0..cols {
            mask |= 1 << (i * WINDOW + j);
        }
    }
    mask
}

/// Whether the CU at stride-1 window position `p` produces an output when
/// the convolution stride is `stride`. Gated CUs do no multiplications.
#[inline]
pub fn lane_enabled(p: usize, stride: usize) -> bool {
    p.is_multiple_of(stride)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CuEngine {
    pub weights: [Fx16; PES_PER_CU],
    pub en_ctrl: u16,
}

impl CuEngine {
    /// Dot product of the enabled PEs with `window`, in accumulator bits,
    /// and the number of multiplications performed.
    pub fn compute(&self, window: &[Fx16; PES_PER_CU]) -> (i64, u32) {
        let mut sum = 0i64;
        for (pe, (&x, &w)) in window.iter().zip(&self.weights).enumerate() {
            if self.en_ctrl & (1 << pe) != 0 {
                sum += fx_mul(x, w).to_bits();
            }
        }
        (sum, self.en_ctrl.count_ones())
    }
}

/// Weight registers currently latched in the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchKey {
    pub first_feature: usize,
    pub features: usize,
    pub channel: usize,
    pub subkernel: usize,
}

/// Per-feature weight registers of the array; all column CUs that serve the
/// same feature share one register set.
#[derive(Debug, Clone)]
pub struct CuArray {
    pub mapping: CuMapping,
    /// One engine per feature slot.
    pub engines: Vec<CuEngine>,
    pub biases: Vec<Fx16>,
    loaded: Option<PrefetchKey>,
}

impl CuArray {
    pub fn new(mapping: CuMapping) -> Self {
        CuArray {
            mapping,
            engines: vec![CuEngine::default(); mapping.features],
            biases: vec![Fx16::ZERO; mapping.features],
            loaded: None,
        }
    }

    pub fn loaded(&self) -> Option<PrefetchKey> {
        self.loaded
    }

    pub fn set_loaded(&mut self, key: PrefetchKey) {
        self.loaded = Some(key);
    }

    pub fn invalidate(&mut self) {
        self.loaded = None;
    }

    /// Window positions handled per cycle.
    pub fn lanes(&self) -> usize {
        self.mapping.columns
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::to_fx;

    #[test]
    fn masks_for_split_kernels() {
        assert_eq!(subkernel_mask(3, 0, 0), 0x1FF);
        assert_eq!(subkernel_mask(1, 0, 0), 0x001);
        // 11 = 3 + 3 + 3 + 2: the last column of sub-kernels keeps two PEs per row
        assert_eq!(subkernel_mask(11, 0, 3), 0b011_011_011);
        assert_eq!(subkernel_mask(11, 3, 3).count_ones(), 4);
        let total: u32 = (0..4)
            .flat_map(|sy| (0..4).map(move |sx| subkernel_mask(11, sy, sx).count_ones()))
            .sum();
        assert_eq!(total, 121);
        assert_eq!(subkernel_mask(5, 1, 1), 0b000_011_011);
    }

    #[test]
    fn disabled_pes_contribute_nothing() {
        let mut cu = CuEngine {
            weights: [to_fx(1.0); 9],
            en_ctrl: 0b000_000_101,
        };
        let window = [to_fx(2.0); 9];
        let (sum, macs) = cu.compute(&window);
        assert_eq!(macs, 2);
        assert_eq!(sum, 2 * fx_mul(to_fx(2.0), to_fx(1.0)).to_bits());
        cu.en_ctrl = 0;
        assert_eq!(cu.compute(&window), (0, 0));
    }

    #[test]
    fn stride_gating() {
        let enabled: Vec<_> = (0..8).filter(|&p| lane_enabled(p, 2)).collect();
        assert_eq!(enabled, vec![0, 2, 4, 6]);
        assert_eq!((0..8).filter(|&p| lane_enabled(p, 4)).count(), 2);
        assert_eq!((0..8).filter(|&p| lane_enabled(p, 1)).count(), 8);
    }

    #[test]
    fn mapping_must_use_all_cus() {
        assert!(CuMapping::new(2, 8).is_ok());
        assert!(CuMapping::new(4, 4).is_ok());
        assert!(CuMapping::new(3, 5).is_err());
        assert_eq!(PEAK_MACS_PER_CYCLE, 144);
    }
}
