//! Spatial partitioning of a layer into tiles and the input halo each tile
//! needs.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::netmodel::ConvLayerSpec;

/// Input extent needed by `out` consecutive outputs along one axis, clipped
/// to the unpadded input extent `in_dim`.
pub fn halo_axis(out: usize, stride: usize, kernel: usize, in_dim: usize) -> usize {
    debug_assert!(out >= 1);
    ((out - 1) * stride + kernel).min(in_dim)
}

/// Input tile `(w, h)` needed to produce a `(out_w, out_h)` block of
/// convolution outputs.
pub fn halo_extent(l: &ConvLayerSpec, out_w: usize, out_h: usize) -> (usize, usize) {
    (
        halo_axis(out_w, l.stride, l.kernel, l.in_w),
        halo_axis(out_h, l.stride, l.kernel, l.in_h),
    )
}

/// Split `n` into `parts` contiguous ranges whose sizes differ by at most
/// one, larger ranges first (227 into 3 gives 76, 76, 75).
pub fn balanced_partition(n: usize, parts: usize) -> Vec<Range<usize>> {
    assert!(parts >= 1 && parts <= n, "cannot split {n} into {parts} parts");
    let (q, r) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = q + usize::from(i < r);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// One tile's extent along one axis, in three coordinate systems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSpan {
    /// Final layer outputs (after pooling when present) owned by this tile.
    pub out: Range<usize>,
    /// Convolution outputs computed by this tile.
    pub conv: Range<usize>,
    /// Unpadded input pixels resident for this tile.
    pub input: Range<usize>,
}

impl AxisSpan {
    pub fn conv_len(&self) -> usize {
        self.conv.len()
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }
}

/// Partition one axis of `l` into `parts` tiles. `in_dim` and `conv_dim` are
/// the axis' input and convolution-output extents.
pub fn axis_spans(l: &ConvLayerSpec, parts: usize, in_dim: usize, conv_dim: usize) -> Vec<AxisSpan> {
    let final_dim = match l.pool {
        Some(p) => p.out_dim(conv_dim).expect("validated layer"),
        None => conv_dim,
    };
    balanced_partition(final_dim, parts)
        .into_iter()
        .enumerate()
        .map(|(i, out)| {
            let conv = match l.pool {
                Some(p) => out.start * p.stride..(out.end - 1) * p.stride + p.kernel,
                None => out.clone(),
            };
            let pad = l.pad as isize;
            let lo = (conv.start * l.stride) as isize - pad;
            let hi = ((conv.end - 1) * l.stride + l.kernel) as isize - pad;
            let lo = lo.clamp(0, in_dim as isize) as usize;
            let mut hi = hi.clamp(0, in_dim as isize) as usize;
            // The last tile also takes any trailing input rows no window
            // touches, so that a single tile loads the whole input.
            if i + 1 == parts {
                hi = in_dim;
            }
            let input = lo..hi.max(lo);
            AxisSpan { out, conv, input }
        })
        .collect()
}
