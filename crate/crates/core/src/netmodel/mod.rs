//! Layer and network descriptors, tensor containers, and the analytic
//! operation/memory formulas used by the planner and reports.

mod io;
mod parse;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::Fx16;

pub use io::{
    load_filters, load_tensor, read_filter_set, read_tensor, store_filters, store_tensor, write_filter_set,
    write_tensor, FILTER_MAGIC, TENSOR_HEADER_BYTES, TENSOR_MAGIC,
};
pub use parse::{parse_network, render_network};
pub use synth::{random_filters, random_network_filters, random_tensor};

/// Bytes per stored element (one Q8.8 word).
pub const ELEM_BYTES: u64 = 2;
/// Report unit; reports use decimal kilobytes.
pub const KB: u64 = 1000;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("network has no layers")]
    NoLayers,
    #[error("layer {layer}: {msg}")]
    InvalidLayer { layer: usize, msg: String },
    #[error("layer {layer}: input {got:?} does not match previous layer output {expected:?}")]
    Chaining {
        layer: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("length mismatch: header implies {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Max-pooling stage attached to a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize) -> Result<Self, String> {
        let p = PoolSpec { kernel, stride };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(2..=3).contains(&self.kernel) {
            return Err(format!("pool kernel must be 2 or 3, got {}", self.kernel));
        }
        if !(1..=3).contains(&self.stride) {
            return Err(format!("pool stride must be 1..=3, got {}", self.stride));
        }
        Ok(())
    }

    /// Pooled extent of a `dim`-long axis, `None` if the window does not fit.
    pub fn out_dim(&self, dim: usize) -> Option<usize> {
        (dim >= self.kernel).then(|| (dim - self.kernel) / self.stride + 1)
    }
}

/// One convolution layer (batch size 1, square kernel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_w: usize,
    pub in_h: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub has_bias: bool,
    pub pool: Option<PoolSpec>,
}

fn conv_axis(dim: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = dim + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl ConvLayerSpec {
    /// A plain layer: stride 1, no padding, one group, bias, no pooling.
    pub fn new(in_w: usize, in_h: usize, in_c: usize, out_c: usize, kernel: usize) -> Self {
        ConvLayerSpec {
            in_w,
            in_h,
            in_c,
            out_c,
            kernel,
            stride: 1,
            pad: 0,
            groups: 1,
            has_bias: true,
            pool: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_pool(mut self, pool: PoolSpec) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_w == 0 || self.in_h == 0 || self.in_c == 0 || self.out_c == 0 {
            return Err("dimensions must be positive".into());
        }
        if self.kernel == 0 {
            return Err("kernel must be >= 1".into());
        }
        if self.stride == 0 {
            return Err("stride must be >= 1".into());
        }
        if self.groups == 0 {
            return Err("groups must be >= 1".into());
        }
        if !self.in_c.is_multiple_of(self.groups) || !self.out_c.is_multiple_of(self.groups) {
            return Err(format!(
                "channels ({} in, {} out) not divisible by groups {}",
                self.in_c, self.out_c, self.groups
            ));
        }
        if let Some(p) = self.pool {
            p.validate()?;
        }
        self.out_dims().map(|_| ())
    }

    /// Convolution output `(w, h, c)` before pooling.
    pub fn conv_dims(&self) -> Result<(usize, usize, usize), String> {
        let w = conv_axis(self.in_w, self.pad, self.kernel, self.stride);
        let h = conv_axis(self.in_h, self.pad, self.kernel, self.stride);
        match (w, h) {
            (Some(w), Some(h)) => Ok((w, h, self.out_c)),
            _ => Err(format!(
                "kernel {} larger than padded input {}x{}",
                self.kernel,
                self.in_w + 2 * self.pad,
                self.in_h + 2 * self.pad
            )),
        }
    }

    /// Layer output `(w, h, c)`, after pooling when present.
    pub fn out_dims(&self) -> Result<(usize, usize, usize), String> {
        let (w, h, c) = self.conv_dims()?;
        match self.pool {
            None => Ok((w, h, c)),
            Some(p) => match (p.out_dim(w), p.out_dim(h)) {
                (Some(pw), Some(ph)) => Ok((pw, ph, c)),
                _ => Err(format!("pool window {} larger than conv output {w}x{h}", p.kernel)),
            },
        }
    }

    pub fn in_dims(&self) -> (usize, usize, usize) {
        (self.in_w, self.in_h, self.in_c)
    }

    pub fn channels_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn features_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Convolution group that output feature `m` belongs to.
    pub fn group_of_feature(&self, m: usize) -> usize {
        m / self.features_per_group()
    }

    /// Multiply-accumulates per inference, padding positions included.
    pub fn macs(&self) -> u64 {
        let (w, h, m) = self.conv_dims().expect("valid layer");
        (w * h * m) as u64 * (self.channels_per_group() * self.kernel * self.kernel) as u64
    }

    /// Operation count with one MAC counted as two ops.
    pub fn ops_count(&self) -> u64 {
        2 * self.macs()
    }

    pub fn input_bytes(&self) -> u64 {
        mem_bytes(self.in_dims())
    }

    /// Convolution output bytes (pre-pooling), the figure reported per layer.
    pub fn output_bytes(&self) -> u64 {
        mem_bytes(self.conv_dims().expect("valid layer"))
    }

    /// Bytes of all filter weights plus biases.
    pub fn weight_bytes(&self) -> u64 {
        let per_feature = (self.channels_per_group() * self.kernel * self.kernel) as u64;
        let bias = if self.has_bias { 1 } else { 0 };
        self.out_c as u64 * (per_feature + bias) * ELEM_BYTES
    }

    /// Pixels per sub-kernel side; kernels wider than 3 are split into
    /// 3x3 pieces.
    pub fn kernel_splits_per_axis(&self) -> usize {
        self.kernel.div_ceil(3)
    }

    pub fn kernel_splits(&self) -> usize {
        self.kernel_splits_per_axis().pow(2)
    }
}

/// Operation count of a layer (free-function form of [`ConvLayerSpec::ops_count`]).
pub fn ops_count(l: &ConvLayerSpec) -> u64 {
    l.ops_count()
}

/// Output `(w, h, c)` of a layer after pooling.
pub fn out_dims(l: &ConvLayerSpec) -> Result<(usize, usize, usize), String> {
    l.out_dims()
}

/// Storage for a `(w, h, c)` tensor of Q8.8 words.
pub fn mem_bytes(dims: (usize, usize, usize)) -> u64 {
    dims.0 as u64 * dims.1 as u64 * dims.2 as u64 * ELEM_BYTES
}

/// Bytes rendered as whole decimal kilobytes, rounded to nearest.
pub fn kb_rounded(bytes: u64) -> u64 {
    (bytes + KB / 2) / KB
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<ConvLayerSpec>,
}

impl NetworkSpec {
    /// Validate every layer and the dimension chaining between them.
    pub fn new(name: impl Into<String>, layers: Vec<ConvLayerSpec>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::NoLayers);
        }
        for (i, l) in layers.iter().enumerate() {
            l.validate()
                .map_err(|msg| NetError::InvalidLayer { layer: i + 1, msg })?;
            if i > 0 {
                let expected = layers[i - 1].out_dims().expect("validated");
                if l.in_dims() != expected {
                    return Err(NetError::Chaining {
                        layer: i + 1,
                        expected,
                        got: l.in_dims(),
                    });
                }
            }
        }
        Ok(NetworkSpec {
            name: name.into(),
            layers,
        })
    }

    pub fn total_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.ops_count()).sum()
    }
}

/// Feature map stack in `[channel][row][col]` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor3D {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<Fx16>,
}

impl Tensor3D {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3D {
            c,
            h,
            w,
            data: vec![Fx16::ZERO; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<Fx16>) -> Result<Self, NetError> {
        if data.len() != c * h * w {
            return Err(NetError::Dims(format!(
                "{}x{}x{} tensor needs {} elements, got {}",
                c,
                h,
                w,
                c * h * w,
                data.len()
            )));
        }
        Ok(Tensor3D { c, h, w, data })
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> Fx16 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: Fx16) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// `(w, h, c)`, matching [`ConvLayerSpec::in_dims`].
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w, self.h, self.c)
    }

    pub fn row(&self, c: usize, y: usize) -> &[Fx16] {
        let start = self.index(c, y, 0);
        &self.data[start..start + self.w]
    }

    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * ELEM_BYTES
    }
}

/// Weights `[m][k][i][j]` and biases `[m]` of one layer. `k` runs over the
/// input channels of `m`'s group only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterSet {
    pub m: usize,
    pub k: usize,
    pub kernel: usize,
    pub weights: Vec<Fx16>,
    pub biases: Vec<Fx16>,
}

impl FilterSet {
    pub fn zeros(m: usize, k: usize, kernel: usize) -> Self {
        FilterSet {
            m,
            k,
            kernel,
            weights: vec![Fx16::ZERO; m * k * kernel * kernel],
            biases: vec![Fx16::ZERO; m],
        }
    }

    pub fn for_layer(l: &ConvLayerSpec) -> Self {
        Self::zeros(l.out_c, l.channels_per_group(), l.kernel)
    }

    #[inline]
    pub fn index(&self, m: usize, k: usize, i: usize, j: usize) -> usize {
        ((m * self.k + k) * self.kernel + i) * self.kernel + j
    }

    #[inline]
    pub fn weight(&self, m: usize, k: usize, i: usize, j: usize) -> Fx16 {
        self.weights[self.index(m, k, i, j)]
    }

    pub fn set_weight(&mut self, m: usize, k: usize, i: usize, j: usize, v: Fx16) {
        let idx = self.index(m, k, i, j);
        self.weights[idx] = v;
    }

    /// Check that this filter set belongs to `l`.
    pub fn check_layer(&self, l: &ConvLayerSpec) -> Result<(), NetError> {
        let want = (l.out_c, l.channels_per_group(), l.kernel);
        if (self.m, self.k, self.kernel) != want
            || self.weights.len() != self.m * self.k * self.kernel * self.kernel
            || self.biases.len() != self.m
        {
            return Err(NetError::Dims(format!(
                "filters are {}x{}x{}x{}, layer needs {}x{}x{}x{}",
                self.m, self.k, self.kernel, self.kernel, want.0, want.1, want.2, want.2
            )));
        }
        Ok(())
    }
}

/// The five convolution layers of AlexNet (two-group layers 2, 4, 5; pooling
/// after layers 1 and 2).
pub fn alexnet() -> NetworkSpec {
    let pool = PoolSpec { kernel: 3, stride: 2 };
    NetworkSpec::new(
        "alexnet",
        vec![
            ConvLayerSpec::new(227, 227, 3, 96, 11).with_stride(4).with_pool(pool),
            ConvLayerSpec::new(27, 27, 96, 256, 5)
                .with_pad(2)
                .with_groups(2)
                .with_pool(pool),
            ConvLayerSpec::new(13, 13, 256, 384, 3).with_pad(1),
            ConvLayerSpec::new(13, 13, 384, 384, 3).with_pad(1).with_groups(2),
            ConvLayerSpec::new(13, 13, 384, 256, 3).with_pad(1).with_groups(2),
        ],
    )
    .expect("alexnet dims chain")
}
