//! Text network descriptions.
//!
//! ```text
//! # comment
//! name = alexnet
//!
//! [layer]
//! in_w = 227
//! in_h = 227
//! in_c = 3
//! out_c = 96
//! kernel = 11
//! stride = 4
//! pool_kernel = 3
//! pool_stride = 2
//! ```
//!
//! `stride`, `pad`, `groups` and `bias` default to 1, 0, 1 and 1. A layer has
//! pooling when `pool_kernel` is given; `pool_stride` defaults to the pool
//! kernel.

use std::fmt::Write;

use super::{ConvLayerSpec, NetError, NetworkSpec, PoolSpec};

#[derive(Default)]
struct LayerFields {
    start_line: usize,
    in_w: Option<usize>,
    in_h: Option<usize>,
    in_c: Option<usize>,
    out_c: Option<usize>,
    kernel: Option<usize>,
    stride: Option<usize>,
    pad: Option<usize>,
    groups: Option<usize>,
    bias: Option<usize>,
    pool_kernel: Option<usize>,
    pool_stride: Option<usize>,
}

impl LayerFields {
    fn slot(&mut self, key: &str) -> Option<&mut Option<usize>> {
        Some(match key {
            "in_w" => &mut self.in_w,
            "in_h" => &mut self.in_h,
            "in_c" => &mut self.in_c,
            "out_c" => &mut self.out_c,
            "kernel" => &mut self.kernel,
            "stride" => &mut self.stride,
            "pad" => &mut self.pad,
            "groups" => &mut self.groups,
            "bias" => &mut self.bias,
            "pool_kernel" => &mut self.pool_kernel,
            "pool_stride" => &mut self.pool_stride,
            _ => return None,
        })
    }

    fn build(self) -> Result<ConvLayerSpec, NetError> {
        let line = self.start_line;
        let required = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| NetError::Parse {
                line,
                msg: format!("layer is missing `{name}`"),
            })
        };
        let has_bias = match self.bias.unwrap_or(1) {
            0 => false,
            1 => true,
            other => {
                return Err(NetError::Parse {
                    line,
                    msg: format!("bias must be 0 or 1, got {other}"),
                })
            }
        };
        let pool = match (self.pool_kernel, self.pool_stride) {
            (None, None) => None,
            (None, Some(_)) => {
                return Err(NetError::Parse {
                    line,
                    msg: "pool_stride given without pool_kernel".into(),
                })
            }
            (Some(k), s) => Some(PoolSpec {
                kernel: k,
                stride: s.unwrap_or(k),
            }),
        };
        Ok(ConvLayerSpec {
            in_w: required(self.in_w, "in_w")?,
            in_h: required(self.in_h, "in_h")?,
            in_c: required(self.in_c, "in_c")?,
            out_c: required(self.out_c, "out_c")?,
            kernel: required(self.kernel, "kernel")?,
            stride: self.stride.unwrap_or(1),
            pad: self.pad.unwrap_or(0),
            groups: self.groups.unwrap_or(1),
            has_bias,
            pool,
        })
    }
}

/// Parse and validate a network description.
pub fn parse_network(text: &str) -> Result<NetworkSpec, NetError> {
    let mut name = String::from("network");
    let mut layers: Vec<LayerFields> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content != "[layer]" {
                return Err(NetError::Parse {
                    line,
                    msg: format!("unknown section `{content}`"),
                });
            }
            layers.push(LayerFields {
                start_line: line,
                ..Default::default()
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| NetError::Parse {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());

        let Some(current) = layers.last_mut() else {
            if key == "name" && !value.is_empty() {
                name = value.to_string();
                continue;
            }
            return Err(NetError::Parse {
                line,
                msg: format!("`{key}` outside of a [layer] section"),
            });
        };
        let slot = current.slot(key).ok_or_else(|| NetError::Parse {
            line,
            msg: format!("unknown key `{key}`"),
        })?;
        if slot.is_some() {
            return Err(NetError::Parse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
            return Err(NetError::Parse {
                line,
                msg: format!("`{key}` must be a decimal integer, got `{value}`"),
            });
        }
        *slot = Some(value.parse().map_err(|_| NetError::Parse {
            line,
            msg: format!("`{key}` value out of range"),
        })?);
    }

    let layers = layers
        .into_iter()
        .map(LayerFields::build)
        .collect::<Result<Vec<_>, _>>()?;
    NetworkSpec::new(name, layers)
}

/// Inverse of [`parse_network`]; every field is written explicitly.
pub fn render_network(net: &NetworkSpec) -> String {
    let mut out = String::new();
    writeln!(out, "name = {}", net.name).unwrap();
    for l in &net.layers {
        out.push_str("\n[layer]\n");
        for (k, v) in [
            ("in_w", l.in_w),
            ("in_h", l.in_h),
            ("in_c", l.in_c),
            ("out_c", l.out_c),
            ("kernel", l.kernel),
            ("stride", l.stride),
            ("pad", l.pad),
            ("groups", l.groups),
            ("bias", l.has_bias as usize),
        ] {
            writeln!(out, "{k} = {v}").unwrap();
        }
        if let Some(p) = l.pool {
            writeln!(out, "pool_kernel = {}", p.kernel).unwrap();
            writeln!(out, "pool_stride = {}", p.stride).unwrap();
        }
    }
    out
}
