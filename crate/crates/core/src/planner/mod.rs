//! Image, feature and kernel decomposition.
//!
//! A [`TilePlan`] splits a layer spatially into `gx x gy` tiles of its final
//! output, splits the output features into `f` residency groups, and splits
//! kernels wider than 3 into `ceil(K/3)^2` zero-padded 3x3 sub-kernels. The
//! buffer bank must hold one tile's input (with halo), the tile's output for
//! one feature group, and that group's weights at the same time.

mod command;
mod tiling;

use std::fmt::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{mem_bytes, ConvLayerSpec, ELEM_BYTES};

pub use command::{
    emit_commands, emit_network, read_command_stream, write_command_stream, Command, CommandError, CommandFifo, Opcode,
    COMMAND_MAGIC, FIFO_DEPTH, FIFO_LOW_WATER,
};
pub use tiling::{axis_spans, balanced_partition, halo_axis, halo_extent, AxisSpan};

/// Capacity of the on-chip buffer bank.
pub const SRAM_BYTES: u64 = 128 * 1024;
/// Largest spatial split searched per axis.
pub const MAX_GRID: usize = 16;
/// Largest feature split; group ids are 8 bits in the command word.
pub const MAX_FEATURE_SPLIT: usize = 256;
/// Default DRAM bandwidth used for transfer-time estimates.
pub const DRAM_BYTES_PER_CYCLE: u64 = 16;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("layer: {0}")]
    Layer(String),
    #[error("invalid split {gx}x{gy}x{f}: {msg}")]
    InvalidSplit {
        gx: usize,
        gy: usize,
        f: usize,
        msg: String,
    },
    #[error("no decomposition fits {budget} bytes (smallest footprint {smallest} bytes)")]
    Infeasible { budget: u64, smallest: u64 },
    #[error("plan {gx}x{gy}x{f} needs {need} bytes, buffer holds {budget}")]
    DoesNotFit {
        gx: usize,
        gy: usize,
        f: usize,
        need: u64,
        budget: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoopOrder {
    /// For each tile, for each feature group: load input and weights.
    TilesOuter,
    /// For each feature group load weights once, then walk the tiles.
    FeaturesOuter,
}

impl LoopOrder {
    pub fn tag(self) -> &'static str {
        match self {
            LoopOrder::TilesOuter => "tiles-outer",
            LoopOrder::FeaturesOuter => "features-outer",
        }
    }
}

/// Buffer-bank bytes of the largest tile / feature group of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    /// Ceil-partition of the input with no halo.
    pub input_naive: u64,
    /// Largest input tile including its halo, as actually loaded.
    pub input_halo: u64,
    /// Largest convolution output tile of one feature group.
    pub output: u64,
    /// Weights and biases of the largest feature group.
    pub weights: u64,
}

impl Footprint {
    /// Bytes that must be resident together.
    pub fn resident(&self) -> u64 {
        self.input_halo + self.output + self.weights
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileDesc {
    pub id: usize,
    pub x: AxisSpan,
    pub y: AxisSpan,
}

impl TileDesc {
    /// A single tile covering the whole layer.
    pub fn whole(l: &ConvLayerSpec) -> Result<TileDesc, PlanError> {
        let (cw, ch, _) = l.conv_dims().map_err(PlanError::Layer)?;
        Ok(TileDesc {
            id: 0,
            x: axis_spans(l, 1, l.in_w, cw).remove(0),
            y: axis_spans(l, 1, l.in_h, ch).remove(0),
        })
    }

    pub fn input_bytes(&self, l: &ConvLayerSpec) -> u64 {
        mem_bytes((self.x.input_len(), self.y.input_len(), l.in_c))
    }

    pub fn conv_pixels(&self) -> usize {
        self.x.conv_len() * self.y.conv_len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub gx: usize,
    pub gy: usize,
    pub f: usize,
    /// Sub-kernel count, `ceil(K/3)^2`.
    pub s: usize,
    /// Tiles in row-major order (`y` outer).
    pub tiles: Vec<TileDesc>,
    /// Output-feature ranges, one per residency group.
    pub groups: Vec<Range<usize>>,
    pub footprint: Footprint,
    pub loop_order: LoopOrder,
    pub dram_in: u64,
    pub dram_out: u64,
}

/// Output features per residency group for a feature split `f`.
pub fn group_size(out_c: usize, f: usize) -> usize {
    out_c.div_ceil(f)
}

/// Splits of `out_c` that yield exactly `f` non-empty groups.
pub fn feature_splits(out_c: usize) -> Vec<usize> {
    (1..=out_c.min(MAX_FEATURE_SPLIT))
        .filter(|&f| out_c.div_ceil(group_size(out_c, f)) == f)
        .collect()
}

fn feature_groups(out_c: usize, f: usize) -> Vec<Range<usize>> {
    let size = group_size(out_c, f);
    (0..f).map(|g| g * size..((g + 1) * size).min(out_c)).collect()
}

/// Per-axis tile spans for every split size, computed once per layer.
struct AxisTable {
    spans: Vec<Vec<AxisSpan>>,
}

impl AxisTable {
    fn new(l: &ConvLayerSpec, in_dim: usize, conv_dim: usize, final_dim: usize) -> Self {
        let spans = (1..=MAX_GRID.min(final_dim))
            .map(|g| axis_spans(l, g, in_dim, conv_dim))
            .collect();
        AxisTable { spans }
    }

    fn get(&self, g: usize) -> &[AxisSpan] {
        &self.spans[g - 1]
    }

    fn max_splits(&self) -> usize {
        self.spans.len()
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Footprint of the `(gx, gy, f)` decomposition.
pub fn tile_footprint(l: &ConvLayerSpec, gx: usize, gy: usize, f: usize) -> Result<Footprint, PlanError> {
    let plan = TilePlan::new(l, gx, gy, f)?;
    Ok(plan.footprint)
}

fn footprint_from_spans(l: &ConvLayerSpec, xs: &[AxisSpan], ys: &[AxisSpan], f: usize) -> Footprint {
    let max_in = |s: &[AxisSpan]| s.iter().map(AxisSpan::input_len).max().unwrap_or(0);
    let max_conv = |s: &[AxisSpan]| s.iter().map(AxisSpan::conv_len).max().unwrap_or(0);
    let fpg = group_size(l.out_c, f);
    let per_feature_weights = (l.channels_per_group() * l.kernel * l.kernel) as u64 + u64::from(l.has_bias);
    Footprint {
        input_naive: mem_bytes((ceil_div(l.in_w, xs.len()), ceil_div(l.in_h, ys.len()), l.in_c)),
        input_halo: mem_bytes((max_in(xs), max_in(ys), l.in_c)),
        output: mem_bytes((max_conv(xs), max_conv(ys), fpg)),
        weights: fpg as u64 * per_feature_weights * ELEM_BYTES,
    }
}

/// DRAM bytes (in, out) for a decomposition under a given loop order.
///
/// Every feature-group pass loads its tile input (halo included). Weights
/// are loaded once per group when features are outermost and once per
/// tile and group otherwise. Outputs are written once.
fn traffic_from_spans(l: &ConvLayerSpec, xs: &[AxisSpan], ys: &[AxisSpan], f: usize, order: LoopOrder) -> (u64, u64) {
    let sum_w: usize = xs.iter().map(AxisSpan::input_len).sum();
    let sum_h: usize = ys.iter().map(AxisSpan::input_len).sum();
    let tiles_input = mem_bytes((sum_w, sum_h, l.in_c));
    let tiles = (xs.len() * ys.len()) as u64;
    let weights = l.weight_bytes();
    let bytes_in = f as u64 * tiles_input
        + match order {
            LoopOrder::TilesOuter => tiles * weights,
            LoopOrder::FeaturesOuter => weights,
        };
    let bytes_out = mem_bytes(l.out_dims().expect("validated"));
    (bytes_in, bytes_out)
}

fn cheaper_order(l: &ConvLayerSpec, xs: &[AxisSpan], ys: &[AxisSpan], f: usize) -> (LoopOrder, u64, u64) {
    let t = traffic_from_spans(l, xs, ys, f, LoopOrder::TilesOuter);
    let fo = traffic_from_spans(l, xs, ys, f, LoopOrder::FeaturesOuter);
    if fo.0 + fo.1 < t.0 + t.1 {
        (LoopOrder::FeaturesOuter, fo.0, fo.1)
    } else {
        (LoopOrder::TilesOuter, t.0, t.1)
    }
}

impl TilePlan {
    /// Build the `(gx, gy, f)` decomposition without checking capacity. The
    /// cheaper loop order is recorded.
    pub fn new(l: &ConvLayerSpec, gx: usize, gy: usize, f: usize) -> Result<TilePlan, PlanError> {
        l.validate().map_err(PlanError::Layer)?;
        let (cw, ch, _) = l.conv_dims().map_err(PlanError::Layer)?;
        let (ow, oh, _) = l.out_dims().map_err(PlanError::Layer)?;
        let invalid = |msg: String| PlanError::InvalidSplit { gx, gy, f, msg };
        if gx == 0 || gy == 0 || f == 0 {
            return Err(invalid("splits must be >= 1".into()));
        }
        if gx > ow || gy > oh {
            return Err(invalid(format!("grid exceeds {ow}x{oh} output")));
        }
        if gx * gy > 1 << 12 {
            return Err(invalid("more than 4096 tiles".into()));
        }
        if !feature_splits(l.out_c).contains(&f) {
            return Err(invalid(format!(
                "{} features cannot be split into {f} non-empty groups",
                l.out_c
            )));
        }
        let xs = axis_spans(l, gx, l.in_w, cw);
        let ys = axis_spans(l, gy, l.in_h, ch);
        Ok(Self::from_spans(l, &xs, &ys, f))
    }

    fn from_spans(l: &ConvLayerSpec, xs: &[AxisSpan], ys: &[AxisSpan], f: usize) -> TilePlan {
        let footprint = footprint_from_spans(l, xs, ys, f);
        let (loop_order, dram_in, dram_out) = cheaper_order(l, xs, ys, f);
        let mut tiles = Vec::with_capacity(xs.len() * ys.len());
        for y in ys {
            for x in xs {
                tiles.push(TileDesc {
                    id: tiles.len(),
                    x: x.clone(),
                    y: y.clone(),
                });
            }
        }
        TilePlan {
            gx: xs.len(),
            gy: ys.len(),
            f,
            s: l.kernel_splits(),
            tiles,
            groups: feature_groups(l.out_c, f),
            footprint,
            loop_order,
            dram_in,
            dram_out,
        }
    }

    /// Like [`TilePlan::new`] but rejects plans that exceed `sram_bytes`.
    pub fn fitting(l: &ConvLayerSpec, gx: usize, gy: usize, f: usize, sram_bytes: u64) -> Result<TilePlan, PlanError> {
        let plan = Self::new(l, gx, gy, f)?;
        if plan.footprint.resident() > sram_bytes {
            return Err(PlanError::DoesNotFit {
                gx,
                gy,
                f,
                need: plan.footprint.resident(),
                budget: sram_bytes,
            });
        }
        Ok(plan)
    }

    /// The same decomposition with the loop order forced.
    pub fn with_loop_order(mut self, l: &ConvLayerSpec, order: LoopOrder) -> TilePlan {
        let xs: Vec<_> = self.tiles[..self.gx].iter().map(|t| t.x.clone()).collect();
        let ys: Vec<_> = self.tiles.iter().step_by(self.gx).map(|t| t.y.clone()).collect();
        let (i, o) = traffic_from_spans(l, &xs, &ys, self.f, order);
        self.loop_order = order;
        self.dram_in = i;
        self.dram_out = o;
        self
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// Decomposition size used to rank plans.
    pub fn parts(&self) -> usize {
        self.gx * self.gy * self.f
    }

    pub fn dram_total(&self) -> u64 {
        self.dram_in + self.dram_out
    }

    /// Cycles to move this plan's DRAM traffic at `bytes_per_cycle`.
    pub fn dram_cycles(&self, bytes_per_cycle: u64) -> u64 {
        self.dram_total().div_ceil(bytes_per_cycle)
    }

    pub fn is_trivial(&self) -> bool {
        self.parts() == 1
    }
}

/// DRAM bytes `(in, out)` of a plan under its recorded loop order.
pub fn dram_traffic(plan: &TilePlan, l: &ConvLayerSpec) -> (u64, u64) {
    let xs: Vec<_> = plan.tiles[..plan.gx].iter().map(|t| t.x.clone()).collect();
    let ys: Vec<_> = plan.tiles.iter().step_by(plan.gx).map(|t| t.y.clone()).collect();
    traffic_from_spans(l, &xs, &ys, plan.f, plan.loop_order)
}

/// Smallest decomposition (fewest `gx*gy*f` parts) whose halo-correct
/// footprint fits `sram_bytes`. Ties go to lower DRAM traffic, then fewer
/// feature groups, then smaller `(gx, gy)`.
pub fn plan_layer(l: &ConvLayerSpec, sram_bytes: u64) -> Result<TilePlan, PlanError> {
    l.validate().map_err(PlanError::Layer)?;
    let (cw, ch, _) = l.conv_dims().map_err(PlanError::Layer)?;
    let (ow, oh, _) = l.out_dims().map_err(PlanError::Layer)?;
    let xt = AxisTable::new(l, l.in_w, cw, ow);
    let yt = AxisTable::new(l, l.in_h, ch, oh);

    // ranking key: (parts, traffic, f, gx, gy)
    type Key = (usize, u64, usize, usize, usize);
    let mut best: Option<(Key, TilePlan)> = None;
    let mut smallest = u64::MAX;
    for f in feature_splits(l.out_c) {
        for gx in 1..=xt.max_splits() {
            for gy in 1..=yt.max_splits() {
                let parts = gx * gy * f;
                if let Some((key, _)) = &best {
                    if parts > key.0 {
                        continue;
                    }
                }
                let (xs, ys) = (xt.get(gx), yt.get(gy));
                let fp = footprint_from_spans(l, xs, ys, f);
                smallest = smallest.min(fp.resident());
                if fp.resident() > sram_bytes {
                    continue;
                }
                let (_, i, o) = cheaper_order(l, xs, ys, f);
                let key = (parts, i + o, f, gx, gy);
                if best.as_ref().is_none_or(|(k, _)| key < *k) {
                    best = Some((key, TilePlan::from_spans(l, xs, ys, f)));
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or(PlanError::Infeasible {
        budget: sram_bytes,
        smallest,
    })
}

/// CSV header of the plan report.
pub const PLAN_CSV_HEADER: &str = "layer,gx,gy,f,s,in_naive_B,in_halo_B,out_B,wt_B,dram_in_B,dram_out_B,loop_order";

/// One CSV line per layer (1-based layer numbers), with header.
pub fn plan_csv(plans: &[TilePlan]) -> String {
    let mut out = String::from(PLAN_CSV_HEADER);
    out.push('\n');
    for (i, p) in plans.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            p.gx,
            p.gy,
            p.f,
            p.s,
            p.footprint.input_naive,
            p.footprint.input_halo,
            p.footprint.output,
            p.footprint.weights,
            p.dram_in,
            p.dram_out,
            p.loop_order.tag()
        )
        .unwrap();
    }
    out
}
