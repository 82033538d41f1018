//! Independent reference models shared by the integration tests.
//!
//! Everything here is computed with arbitrary-precision integers and plain
//! nested vectors, sharing nothing with the library beyond its data types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};

use streamcnn::fxp::Fx16;
use streamcnn::netmodel::{ConvLayerSpec, FilterSet, Tensor3D};
use streamcnn::planner::{Command, Opcode, TilePlan};

/// Exact product of two Q8.8 words as an integer count of 2^-16 units.
pub fn big_mul(a: Fx16, b: Fx16) -> BigInt {
    BigInt::from(a.to_bits()) * BigInt::from(b.to_bits())
}

/// Round a count of 2^-16 units to the nearest count of 2^-8 units, ties to
/// even, then clamp to the 16-bit range.
pub fn big_quantize(units16: &BigInt) -> i16 {
    let step = BigInt::from(256);
    // floor division that is correct for negative values
    let mut q = units16 / &step;
    if (&q * &step) > *units16 {
        q -= 1;
    }
    let r = units16 - &q * &step;
    let twice = &r * 2;
    let q = if twice > step || (twice == step && (&q % 2i32) != BigInt::zero()) {
        q + 1
    } else {
        q
    };
    let lo = BigInt::from(i16::MIN);
    let hi = BigInt::from(i16::MAX);
    let q = if q < lo {
        lo
    } else if q > hi {
        hi
    } else {
        q
    };
    q.to_i16().unwrap()
}

/// Whether an exact accumulator value fits in 48 signed bits.
pub fn fits_acc48(v: &BigInt) -> bool {
    let limit = BigInt::from(1i64 << 47);
    if v.is_negative() {
        -v <= limit
    } else {
        *v < limit
    }
}

fn nested(t: &Tensor3D) -> Vec<Vec<Vec<i16>>> {
    (0..t.c)
        .map(|c| {
            (0..t.h)
                .map(|y| (0..t.w).map(|x| t.data[(c * t.h + y) * t.w + x].to_bits()).collect())
                .collect()
        })
        .collect()
}

/// Brute-force grouped convolution over an explicitly zero-padded copy of
/// the input, summed exactly and quantized once.
pub fn brute_conv(input: &Tensor3D, filters: &FilterSet, l: &ConvLayerSpec) -> Vec<Vec<Vec<i16>>> {
    let x = nested(input);
    let (ph, pw) = (l.in_h + 2 * l.pad, l.in_w + 2 * l.pad);
    let mut padded = vec![vec![vec![0i16; pw]; ph]; l.in_c];
    for c in 0..l.in_c {
        for y in 0..l.in_h {
            for xx in 0..l.in_w {
                padded[c][y + l.pad][xx + l.pad] = x[c][y][xx];
            }
        }
    }
    let oh = (ph - l.kernel) / l.stride + 1;
    let ow = (pw - l.kernel) / l.stride + 1;
    let cpg = l.in_c / l.groups;
    let fpg = l.out_c / l.groups;
    let k = l.kernel;
    let mut out = vec![vec![vec![0i16; ow]; oh]; l.out_c];
    for (m, plane) in out.iter_mut().enumerate() {
        let g = m / fpg;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if l.has_bias {
                    BigInt::from(filters.biases[m].to_bits()) * 256
                } else {
                    BigInt::zero()
                };
                for kc in 0..cpg {
                    for i in 0..k {
                        for j in 0..k {
                            let w = filters.weights[((m * cpg + kc) * k + i) * k + j];
                            let p = padded[g * cpg + kc][oy * l.stride + i][ox * l.stride + j];
                            acc += BigInt::from(p) * BigInt::from(w.to_bits());
                        }
                    }
                }
                assert!(fits_acc48(&acc), "test data overflows the accumulator");
                plane[oy][ox] = big_quantize(&acc);
            }
        }
    }
    out
}

pub fn brute_pool(x: &[Vec<Vec<i16>>], kernel: usize, stride: usize) -> Vec<Vec<Vec<i16>>> {
    x.iter()
        .map(|plane| {
            let (h, w) = (plane.len(), plane[0].len());
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            (0..oh)
                .map(|y| {
                    (0..ow)
                        .map(|xx| {
                            let mut best = i16::MIN;
                            for i in 0..kernel {
                                for j in 0..kernel {
                                    best = best.max(plane[y * stride + i][xx * stride + j]);
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Convolution followed by the layer's pooling, if any.
pub fn brute_layer(input: &Tensor3D, filters: &FilterSet, l: &ConvLayerSpec) -> Vec<Vec<Vec<i16>>> {
    let conv = brute_conv(input, filters, l);
    match l.pool {
        Some(p) => brute_pool(&conv, p.kernel, p.stride),
        None => conv,
    }
}

pub fn as_nested(t: &Tensor3D) -> Vec<Vec<Vec<i16>>> {
    nested(t)
}

/// Validate a single-layer command stream against its plan: every CONV is
/// preceded by the LOADs it needs, each (tile, group) pass convolves every
/// input channel of its features exactly once, pools when the layer pools,
/// and is stored exactly once, after its last CONV.
pub fn check_dependencies(cmds: &[Command], plan: &TilePlan, l: &ConvLayerSpec) -> Result<(), String> {
    let cpg = l.in_c / l.groups;
    let fpg = l.out_c / l.groups;
    let needed = |g: usize| -> BTreeSet<usize> {
        let r = &plan.groups[g];
        (r.start / fpg..=(r.end - 1) / fpg)
            .flat_map(|cg| cg * cpg..(cg + 1) * cpg)
            .collect()
    };
    let mut img: Option<usize> = None;
    let mut wt: Option<usize> = None;
    let mut seen: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    let mut pooled: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut stored: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, c) in cmds.iter().enumerate() {
        let key = (c.tile as usize, c.group as usize);
        match c.op {
            Opcode::LoadImg => img = Some(key.0),
            Opcode::LoadWt => wt = Some(key.1),
            Opcode::Conv => {
                if img != Some(key.0) {
                    return Err(format!("#{i} CONV tile {} without its image", key.0));
                }
                if wt != Some(key.1) {
                    return Err(format!("#{i} CONV group {} without its weights", key.1));
                }
                if stored.contains(&key) {
                    return Err(format!("#{i} CONV after STORE of {key:?}"));
                }
                if !seen.entry(key).or_default().insert(c.channel as usize) {
                    return Err(format!("#{i} channel {} convolved twice for {key:?}", c.channel));
                }
            }
            Opcode::Pool => {
                if seen.get(&key) != Some(&needed(key.1)) {
                    return Err(format!("#{i} POOL before all channels of {key:?}"));
                }
                pooled.insert(key);
            }
            Opcode::Store => {
                if seen.get(&key) != Some(&needed(key.1)) {
                    return Err(format!("#{i} STORE before all channels of {key:?}"));
                }
                if l.pool.is_some() && !pooled.contains(&key) {
                    return Err(format!("#{i} STORE before POOL of {key:?}"));
                }
                if !stored.insert(key) {
                    return Err(format!("#{i} {key:?} stored twice"));
                }
            }
            Opcode::Barrier => {}
        }
    }
    let want = plan.tiles.len() * plan.groups.len();
    if stored.len() != want {
        return Err(format!("{} of {want} passes stored", stored.len()));
    }
    Ok(())
}

pub const KERNELS: [usize; 5] = [1, 3, 5, 7, 11];

/// A valid layer with square input of side at most `max_dim`, drawn from the
/// kernel, stride, pad and group sets the accelerator supports. Pooling is
/// attached with probability `pool_p` when the output is large enough.
pub fn random_layer(rng: &mut impl rand::Rng, max_dim: usize, pool_p: f64) -> ConvLayerSpec {
    use streamcnn::netmodel::PoolSpec;
    loop {
        let k = KERNELS[rng.gen_range(0..KERNELS.len())];
        let stride = [1, 2, 4][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=2usize);
        let groups = rng.gen_range(1..=2usize);
        let lo = k.saturating_sub(2 * pad).max(1);
        if lo > max_dim {
            continue;
        }
        let in_w = rng.gen_range(lo..=max_dim);
        let in_h = rng.gen_range(lo..=max_dim);
        let in_c = groups * rng.gen_range(1..=3usize);
        let out_c = groups * rng.gen_range(1..=4usize);
        let mut l = ConvLayerSpec::new(in_w, in_h, in_c, out_c, k)
            .with_stride(stride)
            .with_pad(pad)
            .with_groups(groups)
            .with_bias(rng.gen_bool(0.7));
        if rng.gen_bool(pool_p) {
            let p = PoolSpec::new(rng.gen_range(2..=3), rng.gen_range(1..=3)).unwrap();
            let (cw, ch, _) = l.conv_dims().unwrap();
            if cw >= p.kernel && ch >= p.kernel {
                l = l.with_pool(p);
            }
        }
        if l.validate().is_ok() {
            return l;
        }
    }
}
