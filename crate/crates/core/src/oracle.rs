//! Direct loop-nest reference for convolution and max pooling.
//!
//! This is the slow, obvious implementation every datapath result is
//! compared against. It shares only the [`crate::fxp`] primitives with the
//! simulator.

use crate::fxp::{acc_add, fx_mul, quantize, Acc48, AccOverflow, Fx16};
use crate::netmodel::{ConvLayerSpec, FilterSet, NetError, NetworkSpec, PoolSpec, Tensor3D};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Overflow(#[from] AccOverflow),
    #[error("{0}")]
    Shape(String),
}

/// Pre-quantization accumulators of one output pixel.
pub fn conv_pixel_acc(
    input: &Tensor3D,
    filters: &FilterSet,
    l: &ConvLayerSpec,
    m: usize,
    y: usize,
    x: usize,
) -> Result<Acc48, AccOverflow> {
    let cpg = l.channels_per_group();
    let base = l.group_of_feature(m) * cpg;
    let mut acc = if l.has_bias {
        Acc48::from_fx(filters.biases[m])
    } else {
        Acc48::ZERO
    };
    for k in 0..cpg {
        for i in 0..l.kernel {
            let iy = (l.stride * y + i) as isize - l.pad as isize;
            if iy < 0 || iy >= input.h as isize {
                continue;
            }
            for j in 0..l.kernel {
                let ix = (l.stride * x + j) as isize - l.pad as isize;
                if ix < 0 || ix >= input.w as isize {
                    continue;
                }
                let px = input.get(base + k, iy as usize, ix as usize);
                acc = acc_add(acc, fx_mul(px, filters.weight(m, k, i, j)))?;
            }
        }
    }
    Ok(acc)
}

fn check_shapes(input: &Tensor3D, filters: &FilterSet, l: &ConvLayerSpec) -> Result<(), OracleError> {
    l.validate().map_err(OracleError::Shape)?;
    if input.dims() != l.in_dims() {
        return Err(OracleError::Shape(format!(
            "input is {:?} (w, h, c), layer expects {:?}",
            input.dims(),
            l.in_dims()
        )));
    }
    filters.check_layer(l)?;
    Ok(())
}

/// Convolution with zero padding and bias, quantized once per output pixel.
/// Pooling attached to `l` is not applied here; see [`run_layer_ref`].
pub fn conv2d_ref(input: &Tensor3D, filters: &FilterSet, l: &ConvLayerSpec) -> Result<Tensor3D, OracleError> {
    check_shapes(input, filters, l)?;
    let (ow, oh, oc) = l.conv_dims().map_err(OracleError::Shape)?;
    let mut out = Tensor3D::zeros(oc, oh, ow);
    for m in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let acc = conv_pixel_acc(input, filters, l, m, y, x)?;
                out.set(m, y, x, quantize(acc));
            }
        }
    }
    Ok(out)
}

/// Per-channel sliding-window maximum, no padding.
pub fn maxpool_ref(input: &Tensor3D, p: &PoolSpec) -> Result<Tensor3D, OracleError> {
    p.validate().map_err(OracleError::Shape)?;
    let (ow, oh) = match (p.out_dim(input.w), p.out_dim(input.h)) {
        (Some(w), Some(h)) => (w, h),
        _ => {
            return Err(OracleError::Shape(format!(
                "pool window {} larger than {}x{} input",
                p.kernel, input.w, input.h
            )))
        }
    };
    let mut out = Tensor3D::zeros(input.c, oh, ow);
    for c in 0..input.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = Fx16::MIN;
                for i in 0..p.kernel {
                    for j in 0..p.kernel {
                        best = best.max(input.get(c, y * p.stride + i, x * p.stride + j));
                    }
                }
                out.set(c, y, x, best);
            }
        }
    }
    Ok(out)
}

/// Convolution followed by the layer's pooling, if any.
pub fn run_layer_ref(input: &Tensor3D, filters: &FilterSet, l: &ConvLayerSpec) -> Result<Tensor3D, OracleError> {
    let conv = conv2d_ref(input, filters, l)?;
    match &l.pool {
        Some(p) => maxpool_ref(&conv, p),
        None => Ok(conv),
    }
}

/// Run every layer in order, returning the final activations.
pub fn run_network_ref(net: &NetworkSpec, input: &Tensor3D, weights: &[FilterSet]) -> Result<Tensor3D, OracleError> {
    Ok(run_network_ref_layers(net, input, weights)?
        .pop()
        .expect("networks have at least one layer"))
}

/// Like [`run_network_ref`] but keeps every layer's output.
pub fn run_network_ref_layers(
    net: &NetworkSpec,
    input: &Tensor3D,
    weights: &[FilterSet],
) -> Result<Vec<Tensor3D>, OracleError> {
    if weights.len() != net.layers.len() {
        return Err(OracleError::Shape(format!(
            "{} filter sets for {} layers",
            weights.len(),
            net.layers.len()
        )));
    }
    let mut outputs: Vec<Tensor3D> = Vec::with_capacity(net.layers.len());
    for (l, f) in net.layers.iter().zip(weights) {
        let x = outputs.last().unwrap_or(input);
        let y = run_layer_ref(x, f, l)?;
        outputs.push(y);
    }
    Ok(outputs)
}
