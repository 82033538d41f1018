//! Cycle-approximate model of the streaming convolution datapath.
//!
//! Data moves DRAM -> buffer bank -> column buffer -> CU array ->
//! accumulation buffer -> buffer bank -> DRAM, driven by the planner's
//! command stream. Each `CONV` command covers one input channel of one
//! tile and feature group and is executed as a series of passes, one per
//! (feature slot set, 3x3 sub-kernel). A pass streams the padded input rows
//! the sub-kernel touches, one 8-pixel word per cycle.
//!
//! The bank has one port. Per cycle it serves, in priority order, a pending
//! accumulator writeback, a weight prefetch, or the input stream; a pass
//! that needs the port and loses stalls for that cycle.

mod accum;
mod bank;
mod colbuf;
mod cu;
mod pool;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{Acc48, AccOverflow, Fx16};
use crate::netmodel::{ConvLayerSpec, FilterSet, NetError, NetworkSpec, Tensor3D, ELEM_BYTES};
use crate::perfcli::PerfCounters;
use crate::planner::{
    emit_commands, emit_network, Command, CommandError, CommandFifo, Footprint, LoopOrder, Opcode, PlanError, TileDesc,
    TilePlan, SRAM_BYTES,
};

pub use accum::AccumBuffer;
pub use bank::{words_for, BufferBank, Region, Slot, WORD_PIXELS};
pub use colbuf::{ColumnBuffer, WINDOW};
pub use cu::{
    lane_enabled, subkernel_mask, CuArray, CuEngine, CuMapping, PrefetchKey, CU_COUNT, PEAK_MACS_PER_CYCLE, PES_PER_CU,
};
pub use pool::{compare4, PoolUnit, COMPARATOR_INPUTS, SCRATCHPAD_ROWS};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("buffer bank overflow: {need} bytes requested with {live} of {capacity} live")]
    Capacity { need: u64, live: u64, capacity: u64 },
    #[error("command order: {0}")]
    Dependency(String),
    #[error(transparent)]
    Overflow(#[from] AccOverflow),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelConfig {
    pub sram_bytes: u64,
    pub mapping: CuMapping,
    /// Drain cycles at the end of every pass.
    pub pipeline_depth: u64,
    /// Idle rows streamed before a pass on top of the two-row window fill.
    pub extra_warmup_rows: usize,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig {
            sram_bytes: SRAM_BYTES,
            mapping: CuMapping::default(),
            pipeline_depth: 3,
            extra_warmup_rows: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleResult {
    pub stalled: bool,
    /// Window dot products produced this cycle.
    pub results: u32,
    pub macs: u32,
    /// The active pass completed in this cycle.
    pub pass_done: bool,
}

/// DRAM-side view of the layer being executed.
#[derive(Clone, Copy)]
struct LayerIo<'a> {
    tiles: &'a [TileDesc],
    groups: &'a [Range<usize>],
    input: &'a Tensor3D,
    filters: &'a FilterSet,
}

#[derive(Debug, Clone)]
struct Pass {
    /// Group-local feature served by each feature slot.
    slots: Vec<usize>,
    stride: usize,
    /// Unpadded input coordinates of the first streamed row and column.
    row0: isize,
    col0: isize,
    /// Bank address of the pass channel's first resident pixel.
    chan_base: usize,
    in_w: usize,
    in_rows: Range<isize>,
    in_cols: Range<isize>,
    rows: usize,
    cols: usize,
    words: usize,
    r: usize,
    w: usize,
    chunk: usize,
    warmup: u64,
    drain: u64,
    finishes_channel: bool,
}

/// Accumulators and output region of the (tile, group) being computed.
#[derive(Debug, Clone)]
struct Residency {
    tile: usize,
    group: usize,
    features: Range<usize>,
    conv_h: usize,
    conv_w: usize,
    finalized: usize,
    pooled: bool,
}

/// Outputs and per-layer counters of a network run.
#[derive(Debug, Clone)]
pub struct NetworkRun {
    pub outputs: Vec<Tensor3D>,
    pub layers: Vec<PerfCounters>,
}

impl NetworkRun {
    pub fn total(&self) -> PerfCounters {
        self.layers.iter().copied().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Accelerator {
    config: AccelConfig,
    layer: Option<ConvLayerSpec>,
    bank: BufferBank,
    colbuf: ColumnBuffer,
    cu: CuArray,
    accum: AccumBuffer,
    counters: PerfCounters,
    input_tile: Option<(usize, TileDesc)>,
    weight_group: Option<usize>,
    residency: Option<Residency>,
    pass: Option<Pass>,
    writeback_pending: u64,
    prefetch_pending: u64,
}

fn dependency(msg: impl Into<String>) -> SimError {
    SimError::Dependency(msg.into())
}

fn per_feature_weights(l: &ConvLayerSpec) -> usize {
    l.channels_per_group() * l.kernel * l.kernel + usize::from(l.has_bias)
}

impl Accelerator {
    pub fn new(config: AccelConfig) -> Self {
        Accelerator {
            config,
            layer: None,
            bank: BufferBank::new(config.sram_bytes),
            colbuf: ColumnBuffer::new(),
            cu: CuArray::new(config.mapping),
            accum: AccumBuffer::default(),
            counters: PerfCounters::default(),
            input_tile: None,
            weight_group: None,
            residency: None,
            pass: None,
            writeback_pending: 0,
            prefetch_pending: 0,
        }
    }

    pub fn config(&self) -> &AccelConfig {
        &self.config
    }

    pub fn counters(&self) -> &PerfCounters {
        &self.counters
    }

    pub fn bank(&self) -> &BufferBank {
        &self.bank
    }

    /// Prepare for a layer executed under `plan`, clearing all state and
    /// counters. Plans whose resident footprint exceeds the buffer bank are
    /// rejected.
    pub fn configure_layer(&mut self, l: &ConvLayerSpec, plan: &TilePlan) -> Result<(), SimError> {
        l.validate().map_err(SimError::Config)?;
        let need = plan.footprint.resident();
        if need > self.config.sram_bytes {
            return Err(SimError::Capacity {
                need,
                live: 0,
                capacity: self.config.sram_bytes,
            });
        }
        if plan.s != l.kernel_splits() {
            return Err(SimError::Config(format!(
                "plan has {} sub-kernels, layer needs {}",
                plan.s,
                l.kernel_splits()
            )));
        }
        *self = Accelerator::new(self.config);
        self.layer = Some(*l);
        Ok(())
    }

    fn layer(&self) -> Result<ConvLayerSpec, SimError> {
        self.layer.ok_or_else(|| dependency("no layer configured"))
    }

    fn check_capacity(&self) -> Result<(), SimError> {
        let live = self.bank.live_bytes();
        if live > self.bank.capacity_bytes() {
            return Err(SimError::Capacity {
                need: 0,
                live,
                capacity: self.bank.capacity_bytes(),
            });
        }
        Ok(())
    }

    fn drain_writeback(&mut self) {
        self.counters.cycles += self.writeback_pending;
        self.counters.sram_writes += self.writeback_pending;
        self.writeback_pending = 0;
    }

    /// Latch the weights of sub-kernel `subkernel` of `channel` for the
    /// group-local features in `slots`, whose first global index is
    /// `first_feature`. Returns the number of values moved out of the bank;
    /// zero when the registers already hold them.
    pub fn prefetch_weights(
        &mut self,
        first_feature: usize,
        slots: &[usize],
        channel: usize,
        subkernel: usize,
    ) -> Result<usize, SimError> {
        let l = self.layer()?;
        if slots.len() > self.cu.mapping.features {
            return Err(SimError::Config(format!(
                "{} features for {} feature slots",
                slots.len(),
                self.cu.mapping.features
            )));
        }
        let key = PrefetchKey {
            first_feature,
            features: slots.len(),
            channel,
            subkernel,
        };
        if self.cu.loaded() == Some(key) {
            return Ok(0);
        }
        let region = self
            .bank
            .region(Slot::Weights)
            .ok_or_else(|| dependency("weight prefetch without resident weights"))?;
        let (k, cpg) = (l.kernel, l.channels_per_group());
        let pf = per_feature_weights(&l);
        let kl = channel % cpg;
        let splits = l.kernel_splits_per_axis();
        let (sy, sx) = (subkernel / splits, subkernel % splits);
        let mask = subkernel_mask(k, sy, sx);
        let mem = self.bank.slice(region);
        for (engine, &ml) in self.cu.engines.iter_mut().zip(slots) {
            let base = ml * pf + kl * k * k;
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let (ki, kj) = (sy * WINDOW + i, sx * WINDOW + j);
                    engine.weights[i * WINDOW + j] = if ki < k && kj < k {
                        mem[base + ki * k + kj]
                    } else {
                        Fx16::ZERO
                    };
                }
            }
            engine.en_ctrl = mask;
        }
        for (b, &ml) in self.cu.biases.iter_mut().zip(slots) {
            *b = if l.has_bias { mem[ml * pf + pf - 1] } else { Fx16::ZERO };
        }
        self.cu.set_loaded(key);
        let values = slots.len() * (PES_PER_CU + usize::from(l.has_bias));
        self.prefetch_pending += words_for(values);
        Ok(values)
    }

    /// True while a pass is streaming.
    pub fn pass_active(&self) -> bool {
        self.pass.is_some()
    }

    fn begin_pass(
        &mut self,
        first_feature: usize,
        slots: Vec<usize>,
        channel: usize,
        subkernel: usize,
        finishes_channel: bool,
    ) -> Result<(), SimError> {
        let l = self.layer()?;
        let (conv_h, conv_w) = match &self.residency {
            Some(r) => (r.conv_h, r.conv_w),
            None => return Err(dependency("pass without live accumulators")),
        };
        let Some((_, tile)) = &self.input_tile else {
            return Err(dependency("pass without a resident input tile"));
        };
        let region = self
            .bank
            .region(Slot::Input)
            .ok_or_else(|| dependency("pass without a resident input tile"))?;
        let splits = l.kernel_splits_per_axis();
        let (sy, sx) = (subkernel / splits, subkernel % splits);
        let a = l.stride;
        let rows = a * (conv_h - 1) + WINDOW;
        let cols = a * (conv_w - 1) + WINDOW;
        let pad = l.pad as isize;
        let in_rows = tile.y.input.start as isize..tile.y.input.end as isize;
        let in_cols = tile.x.input.start as isize..tile.x.input.end as isize;
        let plane = tile.y.input_len() * tile.x.input_len();
        let geometry = Pass {
            slots: Vec::new(),
            stride: a,
            row0: (tile.y.conv.start * a + sy * WINDOW) as isize - pad,
            col0: (tile.x.conv.start * a + sx * WINDOW) as isize - pad,
            chan_base: region.offset + channel * plane,
            in_w: tile.x.input_len(),
            in_rows,
            in_cols,
            rows,
            cols,
            words: cols.div_ceil(WORD_PIXELS),
            r: 0,
            w: 0,
            chunk: 0,
            warmup: (self.config.extra_warmup_rows * cols.div_ceil(WORD_PIXELS)) as u64,
            drain: self.config.pipeline_depth,
            finishes_channel,
        };
        self.prefetch_weights(first_feature, &slots, channel, subkernel)?;
        self.colbuf.reset(cols);
        self.pass = Some(Pass { slots, ..geometry });
        Ok(())
    }

    fn stall(&mut self, mut res: CycleResult) -> CycleResult {
        res.stalled = true;
        self.counters.stall_cycles += 1;
        res
    }

    /// Whether word `pass.w` of row `pass.r` holds any resident pixel.
    fn word_hits_tile(pass: &Pass) -> bool {
        let gy = pass.row0 + pass.r as isize;
        if !pass.in_rows.contains(&gy) {
            return false;
        }
        let lo = pass.col0 + (pass.w * WORD_PIXELS) as isize;
        let hi = pass.col0 + (pass.cols.min((pass.w + 1) * WORD_PIXELS)) as isize;
        lo < pass.in_cols.end && hi > pass.in_cols.start
    }

    /// Move word `pass.w` into the column buffer; pixels outside the
    /// resident tile (padding, unused sub-kernel rows) read as zero.
    fn load_word(&mut self, pass: &Pass) -> usize {
        let start = pass.w * WORD_PIXELS;
        let n = WORD_PIXELS.min(pass.cols - start);
        let mut buf = [Fx16::ZERO; WORD_PIXELS];
        let gy = pass.row0 + pass.r as isize;
        if pass.in_rows.contains(&gy) {
            let row_base = pass.chan_base + (gy - pass.in_rows.start) as usize * pass.in_w;
            for (i, v) in buf[..n].iter_mut().enumerate() {
                let gx = pass.col0 + (start + i) as isize;
                if pass.in_cols.contains(&gx) {
                    *v = self.bank.get(row_base + (gx - pass.in_cols.start) as usize);
                }
            }
        }
        self.colbuf.write_word(pass.w, &buf[..n]);
        n
    }

    /// Advance the active pass by one clock.
    pub fn stream_cycle(&mut self) -> Result<CycleResult, SimError> {
        let Some(mut pass) = self.pass.take() else {
            return Err(dependency("no active pass"));
        };
        let res = self.step(&mut pass)?;
        if res.pass_done {
            self.finish_pass(pass)?;
        } else {
            self.pass = Some(pass);
        }
        Ok(res)
    }

    fn step(&mut self, pass: &mut Pass) -> Result<CycleResult, SimError> {
        self.check_capacity()?;
        self.counters.cycles += 1;
        let mut res = CycleResult::default();

        // Port arbitration: writeback, then prefetch, then the stream.
        let mut port_busy = false;
        if self.writeback_pending > 0 {
            self.writeback_pending -= 1;
            self.counters.sram_writes += 1;
            port_busy = true;
        }
        if self.prefetch_pending > 0 {
            if !port_busy {
                self.prefetch_pending -= 1;
                self.counters.sram_reads += 1;
                self.counters.prefetch_words += 1;
            }
            return Ok(self.stall(res));
        }
        if pass.warmup > 0 {
            pass.warmup -= 1;
            return Ok(res);
        }
        if pass.r == pass.rows {
            pass.drain -= 1;
            res.pass_done = pass.drain == 0;
            return Ok(res);
        }

        let needs_read = pass.chunk == 0 && Self::word_hits_tile(pass);
        if needs_read && port_busy {
            return Ok(self.stall(res));
        }
        if pass.chunk == 0 {
            if pass.w == 0 {
                self.colbuf.begin_row();
            }
            let n = self.load_word(pass);
            self.counters.pixels_streamed += n as u64;
            if needs_read {
                self.counters.sram_reads += 1;
            }
        }

        let a = pass.stride;
        let mut next_word = true;
        if pass.r >= WINDOW - 1 && (pass.r - (WINDOW - 1)).is_multiple_of(a) {
            let oy = (pass.r - (WINDOW - 1)) / a;
            let positions = self.colbuf.positions_for_word(pass.w);
            let lanes = self.cu.lanes().min(WORD_PIXELS);
            let chunks = positions.len().div_ceil(lanes).max(1);
            let lo = positions.start + pass.chunk * lanes;
            let hi = (lo + lanes).min(positions.end);
            for p in lo..hi {
                if !lane_enabled(p, a) {
                    continue;
                }
                let window = self.colbuf.window(p);
                for (engine, &f) in self.cu.engines.iter().zip(&pass.slots) {
                    let (sum, macs) = engine.compute(&window);
                    self.accum.add(f, oy, p / a, Acc48::new(sum)?)?;
                    res.macs += macs;
                    res.results += 1;
                }
            }
            pass.chunk += 1;
            next_word = pass.chunk == chunks;
            if next_word {
                pass.chunk = 0;
            }
        }
        if next_word {
            pass.w += 1;
            if pass.w == pass.words {
                pass.w = 0;
                pass.r += 1;
            }
        }
        self.counters.macs += u64::from(res.macs);
        res.pass_done = pass.r == pass.rows && pass.drain == 0;
        Ok(res)
    }

    fn finish_pass(&mut self, pass: Pass) -> Result<(), SimError> {
        if !pass.finishes_channel {
            return Ok(());
        }
        let cpg = self.layer()?.channels_per_group();
        let region = self
            .bank
            .region(Slot::Output)
            .ok_or_else(|| dependency("no output region"))?;
        let res = self
            .residency
            .as_mut()
            .ok_or_else(|| dependency("no live accumulators"))?;
        let plane = res.conv_h * res.conv_w;
        for &f in &pass.slots {
            if self.accum.channel_done(f) == cpg {
                let values = self.accum.finalize(f);
                self.bank.slice_mut(region)[f * plane..(f + 1) * plane].copy_from_slice(&values);
                self.writeback_pending += words_for(plane);
                res.finalized += 1;
            }
        }
        Ok(())
    }

    fn check_payload(cmd: &Command, pixels: usize) -> Result<(), SimError> {
        let want = words_for(pixels);
        if u64::from(cmd.payload) != want {
            return Err(SimError::Config(format!(
                "{} carries {} words, expected {want}",
                cmd.op.mnemonic(),
                cmd.payload
            )));
        }
        Ok(())
    }

    fn residency_for(&self, cmd: &Command) -> Result<&Residency, SimError> {
        match &self.residency {
            Some(r) if r.tile == cmd.tile as usize && r.group == cmd.group as usize => {
                if r.finalized < r.features.len() {
                    return Err(dependency(format!(
                        "{} before every channel of tile {} group {} was convolved",
                        cmd.op.mnemonic(),
                        cmd.tile,
                        cmd.group
                    )));
                }
                Ok(r)
            }
            _ => Err(dependency(format!(
                "{} for tile {} group {} without computed outputs",
                cmd.op.mnemonic(),
                cmd.tile,
                cmd.group
            ))),
        }
    }

    fn execute(&mut self, cmd: &Command, io: &LayerIo, output: &mut Tensor3D) -> Result<(), SimError> {
        match cmd.op {
            Opcode::LoadWt => self.load_weights(cmd, io),
            Opcode::LoadImg => self.load_image(cmd, io),
            Opcode::Conv => self.conv(cmd, io),
            Opcode::Pool => self.pool(cmd),
            Opcode::Store => self.store(cmd, output),
            Opcode::Barrier => {
                self.drain_writeback();
                self.counters.cycles += 1;
                Ok(())
            }
        }
    }

    fn group<'a>(io: &LayerIo<'a>, g: u8) -> Result<&'a Range<usize>, SimError> {
        io.groups
            .get(g as usize)
            .ok_or_else(|| dependency(format!("feature group {g} not in plan")))
    }

    fn load_weights(&mut self, cmd: &Command, io: &LayerIo) -> Result<(), SimError> {
        let l = self.layer()?;
        let features = Self::group(io, cmd.group)?.clone();
        let pf = per_feature_weights(&l);
        let per_channel_set = l.channels_per_group() * l.kernel * l.kernel;
        let pixels = features.len() * pf;
        Self::check_payload(cmd, pixels)?;
        self.drain_writeback();
        self.bank.free(Slot::Input);
        self.bank.free(Slot::Output);
        self.input_tile = None;
        self.residency = None;
        let region = self.bank.alloc(Slot::Weights, pixels)?;
        let mem = self.bank.slice_mut(region);
        for (ml, m) in features.enumerate() {
            let src = &io.filters.weights[m * per_channel_set..(m + 1) * per_channel_set];
            mem[ml * pf..ml * pf + per_channel_set].copy_from_slice(src);
            if l.has_bias {
                mem[ml * pf + pf - 1] = io.filters.biases[m];
            }
        }
        let words = words_for(pixels);
        self.counters.cycles += words;
        self.counters.sram_writes += words;
        self.counters.dram_bytes_in += pixels as u64 * ELEM_BYTES;
        self.weight_group = Some(cmd.group as usize);
        self.cu.invalidate();
        Ok(())
    }

    fn load_image(&mut self, cmd: &Command, io: &LayerIo) -> Result<(), SimError> {
        let l = self.layer()?;
        let tile = io
            .tiles
            .get(cmd.tile as usize)
            .ok_or_else(|| dependency(format!("tile {} not in plan", cmd.tile)))?
            .clone();
        let (iw, ih) = (tile.x.input_len(), tile.y.input_len());
        let pixels = l.in_c * ih * iw;
        Self::check_payload(cmd, pixels)?;
        self.drain_writeback();
        self.bank.free(Slot::Output);
        self.bank.free(Slot::Input);
        self.residency = None;
        let region = self.bank.alloc(Slot::Input, pixels)?;
        let mem = self.bank.slice_mut(region);
        let mut dst = 0;
        for c in 0..l.in_c {
            for y in tile.y.input.clone() {
                mem[dst..dst + iw].copy_from_slice(&io.input.row(c, y)[tile.x.input.clone()]);
                dst += iw;
            }
        }
        let words = words_for(pixels);
        self.counters.cycles += words;
        self.counters.sram_writes += words;
        self.counters.dram_bytes_in += pixels as u64 * ELEM_BYTES;
        self.input_tile = Some((cmd.tile as usize, tile));
        Ok(())
    }

    fn start_residency(&mut self, t: usize, g: usize, features: Range<usize>) -> Result<(), SimError> {
        let l = self.layer()?;
        let (conv_h, conv_w) = match &self.input_tile {
            Some((_, tile)) => (tile.y.conv_len(), tile.x.conv_len()),
            None => return Err(dependency("no input tile")),
        };
        let weights = self
            .bank
            .region(Slot::Weights)
            .ok_or_else(|| dependency("no weights resident"))?;
        let pf = per_feature_weights(&l);
        let biases: Vec<Fx16> = (0..features.len())
            .map(|ml| {
                if l.has_bias {
                    self.bank.get(weights.offset + ml * pf + pf - 1)
                } else {
                    Fx16::ZERO
                }
            })
            .collect();
        self.accum.reset(&biases, conv_h, conv_w);
        self.bank.alloc(Slot::Output, features.len() * conv_h * conv_w)?;
        self.residency = Some(Residency {
            tile: t,
            group: g,
            features,
            conv_h,
            conv_w,
            finalized: 0,
            pooled: false,
        });
        Ok(())
    }

    fn conv(&mut self, cmd: &Command, io: &LayerIo) -> Result<(), SimError> {
        let l = self.layer()?;
        let (t, g, c) = (cmd.tile as usize, cmd.group as usize, cmd.channel as usize);
        if !matches!(&self.input_tile, Some((tt, _)) if *tt == t) {
            return Err(dependency(format!("CONV on tile {t} before its LOAD_IMG")));
        }
        if self.weight_group != Some(g) {
            return Err(dependency(format!("CONV for group {g} before its LOAD_WT")));
        }
        if cmd.payload as usize != l.kernel_splits() {
            return Err(SimError::Config(format!(
                "CONV carries {} sub-kernels, layer needs {}",
                cmd.payload,
                l.kernel_splits()
            )));
        }
        if c >= l.in_c {
            return Err(SimError::Config(format!("channel {c} of {}", l.in_c)));
        }
        let features = Self::group(io, cmd.group)?.clone();
        let fpg = l.features_per_group();
        let cg = c / l.channels_per_group();
        let owned = features.start.max(cg * fpg)..features.end.min((cg + 1) * fpg);
        if owned.is_empty() {
            return Err(SimError::Config(format!("channel {c} feeds no feature of group {g}")));
        }
        let live = matches!(&self.residency, Some(r) if r.tile == t && r.group == g);
        if !live {
            self.start_residency(t, g, features.clone())?;
        }
        let slots_per_pass = self.config.mapping.features;
        let s = l.kernel_splits();
        let mut m = owned.start;
        while m < owned.end {
            let hi = (m + slots_per_pass).min(owned.end);
            let slots: Vec<usize> = (m..hi).map(|x| x - features.start).collect();
            if slots.iter().any(|&f| self.accum.is_finalized(f)) {
                return Err(dependency(format!("channel {c} after features {m}..{hi} completed")));
            }
            for sk in 0..s {
                self.begin_pass(m, slots.clone(), c, sk, sk + 1 == s)?;
                while self.pass.is_some() {
                    self.stream_cycle()?;
                }
            }
            m = hi;
        }
        Ok(())
    }

    fn pool(&mut self, cmd: &Command) -> Result<(), SimError> {
        let l = self.layer()?;
        let p = l
            .pool
            .ok_or_else(|| SimError::Config("POOL on a layer without pooling".into()))?;
        if cmd.pool_params() != (p.kernel, p.stride) {
            return Err(SimError::Config(format!(
                "POOL carries {:?}, layer pools {}x{} stride {}",
                cmd.pool_params(),
                p.kernel,
                p.kernel,
                p.stride
            )));
        }
        let res = self.residency_for(cmd)?.clone();
        if res.pooled {
            return Err(dependency("tile pooled twice"));
        }
        let Some((_, tile)) = &self.input_tile else {
            return Err(dependency("no input tile"));
        };
        let (ph, pw) = (tile.y.out.len(), tile.x.out.len());
        self.drain_writeback();
        let region = self
            .bank
            .region(Slot::Output)
            .ok_or_else(|| dependency("no output region"))?;
        let a = l.stride;
        let (ch, cw) = (res.conv_h, res.conv_w);
        let plane = ch * cw;
        let stride1_rows = (ch - 1) * a + 1;
        let junk = vec![Fx16::MAX; cw];
        for ml in 0..res.features.len() {
            let conv = self.bank.slice(region)[ml * plane..(ml + 1) * plane].to_vec();
            let mut unit = PoolUnit::new(p, a, cw);
            let mut pooled = Vec::with_capacity(ph * pw);
            for base in (0..stride1_rows).step_by(SCRATCHPAD_ROWS) {
                let block: Vec<Vec<Fx16>> = (base..(base + SCRATCHPAD_ROWS).min(stride1_rows))
                    .map(|sr| {
                        if sr % a == 0 {
                            conv[sr / a * cw..(sr / a + 1) * cw].to_vec()
                        } else {
                            junk.clone()
                        }
                    })
                    .collect();
                for row in unit.push_scratchpad(&block, base) {
                    pooled.extend(row);
                }
            }
            if pooled.len() != ph * pw {
                return Err(SimError::Config(format!(
                    "pooling produced {} values for a {pw}x{ph} tile",
                    pooled.len()
                )));
            }
            self.bank.slice_mut(region)[ml * ph * pw..(ml + 1) * ph * pw].copy_from_slice(&pooled);
            let reads = ch as u64 * words_for(cw);
            let writes = ph as u64 * words_for(pw);
            self.counters.sram_reads += reads;
            self.counters.sram_writes += writes;
            self.counters.cycles += reads + writes;
        }
        if let Some(r) = self.residency.as_mut() {
            r.pooled = true;
        }
        Ok(())
    }

    fn store(&mut self, cmd: &Command, output: &mut Tensor3D) -> Result<(), SimError> {
        let l = self.layer()?;
        let res = self.residency_for(cmd)?.clone();
        if l.pool.is_some() && !res.pooled {
            return Err(dependency("STORE before POOL"));
        }
        let Some((_, tile)) = &self.input_tile else {
            return Err(dependency("no input tile"));
        };
        let (oh, ow) = (tile.y.out.len(), tile.x.out.len());
        let (oy, ox) = (tile.y.out.start, tile.x.out.start);
        let pixels = res.features.len() * oh * ow;
        Self::check_payload(cmd, pixels)?;
        self.drain_writeback();
        let region = self
            .bank
            .region(Slot::Output)
            .ok_or_else(|| dependency("no output region"))?;
        let mem = self.bank.slice(region);
        for (ml, m) in res.features.clone().enumerate() {
            for y in 0..oh {
                let dst = output.index(m, oy + y, ox);
                let src = (ml * oh + y) * ow;
                output.data[dst..dst + ow].copy_from_slice(&mem[src..src + ow]);
            }
        }
        let words = words_for(pixels);
        self.counters.cycles += words;
        self.counters.sram_reads += words;
        self.counters.dram_bytes_out += pixels as u64 * ELEM_BYTES;
        self.bank.free(Slot::Output);
        self.residency = None;
        Ok(())
    }

    fn check_operands(l: &ConvLayerSpec, input: &Tensor3D, filters: &FilterSet) -> Result<Tensor3D, SimError> {
        filters.check_layer(l)?;
        if input.dims() != l.in_dims() {
            return Err(SimError::Config(format!(
                "input is {:?} (w, h, c), layer expects {:?}",
                input.dims(),
                l.in_dims()
            )));
        }
        let (w, h, c) = l.out_dims().map_err(SimError::Config)?;
        Ok(Tensor3D::zeros(c, h, w))
    }

    fn close_layer(&mut self) {
        self.drain_writeback();
        self.counters.peak_sram_bytes = self.bank.peak_bytes();
    }

    /// Replay a command stream for one layer through the command FIFO.
    pub fn execute_layer(
        &mut self,
        l: &ConvLayerSpec,
        plan: &TilePlan,
        cmds: Vec<Command>,
        input: &Tensor3D,
        filters: &FilterSet,
    ) -> Result<(Tensor3D, PerfCounters), SimError> {
        let mut output = Self::check_operands(l, input, filters)?;
        self.configure_layer(l, plan)?;
        let io = LayerIo {
            tiles: &plan.tiles,
            groups: &plan.groups,
            input,
            filters,
        };
        let mut fifo = CommandFifo::new(cmds);
        while let Some(cmd) = fifo.pop() {
            self.execute(&cmd, &io, &mut output)?;
            self.counters.commands_executed += 1;
        }
        self.close_layer();
        self.counters.command_bytes = fifo.fetched_bytes();
        Ok((output, self.counters))
    }

    /// Emit and execute the command stream of `plan`.
    pub fn run_layer(
        &mut self,
        l: &ConvLayerSpec,
        plan: &TilePlan,
        input: &Tensor3D,
        filters: &FilterSet,
    ) -> Result<(Tensor3D, PerfCounters), SimError> {
        let cmds = emit_commands(plan, l)?;
        self.execute_layer(l, plan, cmds, input, filters)
    }

    /// Compute one tile for the features in `features`, returning the
    /// tile's final outputs (`features.len()` maps of the tile's output
    /// extent).
    pub fn run_tile(
        &mut self,
        input: &Tensor3D,
        filters: &FilterSet,
        l: &ConvLayerSpec,
        tile: &TileDesc,
        features: Range<usize>,
    ) -> Result<(Tensor3D, PerfCounters), SimError> {
        if features.is_empty() || features.end > l.out_c {
            return Err(SimError::Config(format!("features {features:?} of {}", l.out_c)));
        }
        let nf = features.len() as u64;
        let footprint = Footprint {
            input_naive: tile.input_bytes(l),
            input_halo: tile.input_bytes(l),
            output: tile.conv_pixels() as u64 * nf * ELEM_BYTES,
            weights: nf * per_feature_weights(l) as u64 * ELEM_BYTES,
        };
        let plan = TilePlan {
            gx: 1,
            gy: 1,
            f: 1,
            s: l.kernel_splits(),
            tiles: vec![TileDesc { id: 0, ..tile.clone() }],
            groups: vec![features.clone()],
            footprint,
            loop_order: LoopOrder::TilesOuter,
            dram_in: 0,
            dram_out: 0,
        };
        let (full, counters) = self.run_layer(l, &plan, input, filters)?;
        let (oh, ow) = (tile.y.out.len(), tile.x.out.len());
        let mut out = Tensor3D::zeros(features.len(), oh, ow);
        for (ml, m) in features.enumerate() {
            for y in 0..oh {
                for x in 0..ow {
                    out.set(ml, y, x, full.get(m, tile.y.out.start + y, tile.x.out.start + x));
                }
            }
        }
        Ok((out, counters))
    }

    /// Run a whole network from one command stream with a `BARRIER` after
    /// each layer. Every layer reads the previous layer's output.
    pub fn run_network(
        &mut self,
        net: &NetworkSpec,
        plans: &[TilePlan],
        input: &Tensor3D,
        weights: &[FilterSet],
    ) -> Result<NetworkRun, SimError> {
        let n = net.layers.len();
        if plans.len() != n || weights.len() != n {
            return Err(SimError::Config(format!(
                "{} plans and {} filter sets for {n} layers",
                plans.len(),
                weights.len()
            )));
        }
        let mut fifo = CommandFifo::new(emit_network(plans, &net.layers)?);
        let mut run = NetworkRun {
            outputs: Vec::with_capacity(n),
            layers: Vec::with_capacity(n),
        };
        let mut prev = input.clone();
        let mut output = Self::check_operands(&net.layers[0], &prev, &weights[0])?;
        self.configure_layer(&net.layers[0], &plans[0])?;
        let mut fetched = 0;
        let mut i = 0;
        while let Some(cmd) = fifo.pop() {
            if i == n {
                return Err(dependency("commands after the final BARRIER"));
            }
            if cmd.op == Opcode::Barrier && cmd.payload as usize != i {
                return Err(dependency(format!(
                    "BARRIER for layer {} while executing layer {i}",
                    cmd.payload
                )));
            }
            let io = LayerIo {
                tiles: &plans[i].tiles,
                groups: &plans[i].groups,
                input: &prev,
                filters: &weights[i],
            };
            self.execute(&cmd, &io, &mut output)?;
            self.counters.commands_executed += 1;
            if cmd.op == Opcode::Barrier {
                self.close_layer();
                self.counters.command_bytes = fifo.fetched_bytes() - fetched;
                fetched = fifo.fetched_bytes();
                run.layers.push(self.counters);
                run.outputs.push(output.clone());
                prev = output;
                i += 1;
                if i == n {
                    break;
                }
                output = Self::check_operands(&net.layers[i], &prev, &weights[i])?;
                self.configure_layer(&net.layers[i], &plans[i])?;
            }
        }
        if i != n {
            return Err(dependency(format!("stream ended inside layer {i}")));
        }
        Ok(run)
    }
}
