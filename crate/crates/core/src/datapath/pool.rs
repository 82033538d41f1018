//! Streaming max-pooling unit.
//!
//! Convolution results reach the unit through an eight-row scratchpad whose
//! rows share one column address. Rows are indexed at stride-1 resolution,
//! so with a convolution stride `a` only rows whose index is a multiple of
//! `a` hold results; the input multiplexer drops the rest. Valid rows are
//! then pooled: the comparator takes up to three vertically adjacent values
//! of one window column plus a feedback register holding the running
//! maximum, and walks across the window's columns.

use std::collections::VecDeque;

use crate::fxp::Fx16;
use crate::netmodel::PoolSpec;

/// Scratchpad rows R0..R7.
pub const SCRATCHPAD_ROWS: usize = 8;
/// Direct (non-feedback) comparator inputs.
pub const COMPARATOR_INPUTS: usize = 3;

/// Maximum of up to three values and the feedback register.
pub fn compare4(inputs: &[Fx16], feedback: Fx16) -> Fx16 {
    debug_assert!(inputs.len() <= COMPARATOR_INPUTS);
    inputs.iter().copied().fold(feedback, Fx16::max)
}

#[derive(Debug, Clone)]
pub struct PoolUnit {
    spec: PoolSpec,
    conv_stride: usize,
    width: usize,
    /// Valid rows of windows not yet complete; at most `kernel` rows.
    pending: VecDeque<Vec<Fx16>>,
    rows_seen: usize,
    comparisons: u64,
}

impl PoolUnit {
    pub fn new(spec: PoolSpec, conv_stride: usize, width: usize) -> Self {
        assert!(conv_stride >= 1);
        PoolUnit {
            spec,
            conv_stride,
            width,
            pending: VecDeque::with_capacity(spec.kernel),
            rows_seen: 0,
            comparisons: 0,
        }
    }

    /// Forget buffered rows, e.g. when moving to the next feature map.
    pub fn reset(&mut self) {
        self.pending.clear();
        self.rows_seen = 0;
    }

    pub fn out_width(&self) -> usize {
        self.spec.out_dim(self.width).unwrap_or(0)
    }

    /// Comparator activations so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }

    /// Multiplexer select lines for a scratchpad block whose R0 holds
    /// stride-1 row `base`.
    pub fn row_mux(&self, base: usize) -> [bool; SCRATCHPAD_ROWS] {
        std::array::from_fn(|i| (base + i).is_multiple_of(self.conv_stride))
    }

    /// Feed one scratchpad block. Rows rejected by the multiplexer are
    /// ignored whatever they contain.
    pub fn push_scratchpad(&mut self, rows: &[Vec<Fx16>], base: usize) -> Vec<Vec<Fx16>> {
        debug_assert!(rows.len() <= SCRATCHPAD_ROWS);
        let mux = self.row_mux(base);
        rows.iter()
            .zip(mux)
            .filter(|(_, valid)| *valid)
            .filter_map(|(r, _)| self.pool_push(r))
            .collect()
    }

    /// Accept the next valid convolution row; returns a pooled row once a
    /// window's last row arrives.
    pub fn pool_push(&mut self, row: &[Fx16]) -> Option<Vec<Fx16>> {
        debug_assert_eq!(row.len(), self.width);
        let k = self.spec.kernel;
        if self.pending.len() == k {
            self.pending.pop_front();
        }
        self.pending.push_back(row.to_vec());
        self.rows_seen += 1;
        if self.rows_seen < k || !(self.rows_seen - k).is_multiple_of(self.spec.stride) {
            return None;
        }
        let mut out = Vec::with_capacity(self.out_width());
        let mut column = [Fx16::ZERO; COMPARATOR_INPUTS];
        for j in 0..self.out_width() {
            let mut feedback = Fx16::MIN;
            for dx in 0..k {
                let x = j * self.spec.stride + dx;
                for rows in (0..k).step_by(COMPARATOR_INPUTS) {
                    let n = (k - rows).min(COMPARATOR_INPUTS);
                    for (slot, v) in column[..n].iter_mut().enumerate() {
                        *v = self.pending[rows + slot][x];
                    }
                    feedback = compare4(&column[..n], feedback);
                    self.comparisons += 1;
                }
            }
            out.push(feedback);
        }
        Some(out)
    }
}
