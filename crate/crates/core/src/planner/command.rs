//! 64-bit command words, command-stream emission and the command FIFO.
//!
//! Word layout, most significant bit first:
//!
//! | bits   | field          |
//! |--------|----------------|
//! | 63..56 | opcode         |
//! | 55..44 | tile id        |
//! | 43..36 | feature group  |
//! | 35..24 | input channel  |
//! | 23..0  | payload        |
//!
//! Payloads: `LOAD_IMG`, `LOAD_WT` and `STORE` carry a transfer length in
//! 16-byte words, `CONV` the sub-kernel count, `POOL` the pool kernel in bits
//! 7..4 and the pool stride in bits 3..0, `BARRIER` the layer index.

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LoopOrder, TilePlan};
use crate::netmodel::{ConvLayerSpec, ELEM_BYTES};

pub const COMMAND_MAGIC: [u8; 4] = *b"KCMD";
pub const FIFO_DEPTH: usize = 128;
pub const FIFO_LOW_WATER: usize = 32;

const WORD_BYTES: u64 = 16;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("unknown opcode {0:#04x}")]
    BadOpcode(u8),
    #[error("{field} value {value} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
    #[error("bad command stream magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("command stream truncated: header says {expected} words, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    LoadImg = 1,
    LoadWt = 2,
    Conv = 3,
    Pool = 4,
    Store = 5,
    Barrier = 6,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Result<Self, CommandError> {
        Ok(match v {
            1 => Opcode::LoadImg,
            2 => Opcode::LoadWt,
            3 => Opcode::Conv,
            4 => Opcode::Pool,
            5 => Opcode::Store,
            6 => Opcode::Barrier,
            other => return Err(CommandError::BadOpcode(other)),
        })
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::LoadImg => "LOAD_IMG",
            Opcode::LoadWt => "LOAD_WT",
            Opcode::Conv => "CONV",
            Opcode::Pool => "POOL",
            Opcode::Store => "STORE",
            Opcode::Barrier => "BARRIER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Command {
    pub op: Opcode,
    pub tile: u16,
    pub group: u8,
    pub channel: u16,
    pub payload: u32,
}

fn checked(field: &'static str, value: u64, bits: u32) -> Result<u64, CommandError> {
    if value >> bits != 0 {
        Err(CommandError::FieldOverflow { field, value, bits })
    } else {
        Ok(value)
    }
}

impl Command {
    pub fn new(op: Opcode, tile: usize, group: usize, channel: usize, payload: u64) -> Result<Self, CommandError> {
        Ok(Command {
            op,
            tile: checked("tile", tile as u64, 12)? as u16,
            group: checked("group", group as u64, 8)? as u8,
            channel: checked("channel", channel as u64, 12)? as u16,
            payload: checked("payload", payload, 24)? as u32,
        })
    }

    pub fn encode(&self) -> u64 {
        (self.op as u64) << 56
            | (self.tile as u64) << 44
            | (self.group as u64) << 36
            | (self.channel as u64) << 24
            | self.payload as u64
    }

    pub fn decode(word: u64) -> Result<Self, CommandError> {
        let tile = ((word >> 44) & 0xFFF) as u16;
        let group = ((word >> 36) & 0xFF) as u8;
        let channel = ((word >> 24) & 0xFFF) as u16;
        Ok(Command {
            op: Opcode::from_u8((word >> 56) as u8)?,
            tile,
            group,
            channel,
            payload: (word & 0xFF_FFFF) as u32,
        })
    }

    /// Pool kernel and stride carried by a `POOL` command.
    pub fn pool_params(&self) -> (usize, usize) {
        (((self.payload >> 4) & 0xF) as usize, (self.payload & 0xF) as usize)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} tile={} group={} ch={} payload={}",
            self.op.mnemonic(),
            self.tile,
            self.group,
            self.channel,
            self.payload
        )
    }
}

fn words(bytes: u64) -> u64 {
    bytes.div_ceil(WORD_BYTES)
}

/// Input channels read by the features of `group`, ascending.
pub(crate) fn group_channels(l: &ConvLayerSpec, features: &std::ops::Range<usize>) -> Vec<usize> {
    let (cpg, first, last) = (
        l.channels_per_group(),
        l.group_of_feature(features.start),
        l.group_of_feature(features.end - 1),
    );
    (first * cpg..(last + 1) * cpg).collect()
}

/// Dependency-ordered command stream for one layer.
///
/// Every feature-group pass over a tile is `LOAD_IMG`, then one `CONV` per
/// input channel, an optional `POOL`, and a `STORE`. `LOAD_WT` precedes the
/// first pass that needs the group's weights: once per group when features
/// are outermost, once per pass otherwise.
pub fn emit_commands(plan: &TilePlan, l: &ConvLayerSpec) -> Result<Vec<Command>, CommandError> {
    let per_feature_weights = (l.channels_per_group() * l.kernel * l.kernel) as u64 + u64::from(l.has_bias);
    let mut out = Vec::new();

    let pass = |out: &mut Vec<Command>, t: usize, g: usize, with_weights: bool| -> Result<(), CommandError> {
        let tile = &plan.tiles[t];
        let features = &plan.groups[g];
        if with_weights {
            let bytes = features.len() as u64 * per_feature_weights * ELEM_BYTES;
            out.push(Command::new(Opcode::LoadWt, t, g, 0, words(bytes))?);
        }
        out.push(Command::new(Opcode::LoadImg, t, g, 0, words(tile.input_bytes(l)))?);
        for c in group_channels(l, features) {
            out.push(Command::new(Opcode::Conv, t, g, c, plan.s as u64)?);
        }
        let out_pixels = match l.pool {
            Some(p) => {
                out.push(Command::new(
                    Opcode::Pool,
                    t,
                    g,
                    0,
                    (p.kernel as u64) << 4 | p.stride as u64,
                )?);
                tile.x.out.len() * tile.y.out.len()
            }
            None => tile.conv_pixels(),
        };
        let store_bytes = (out_pixels * features.len()) as u64 * ELEM_BYTES;
        out.push(Command::new(Opcode::Store, t, g, 0, words(store_bytes))?);
        Ok(())
    };

    match plan.loop_order {
        LoopOrder::TilesOuter => {
            for t in 0..plan.tiles.len() {
                for g in 0..plan.groups.len() {
                    pass(&mut out, t, g, true)?;
                }
            }
        }
        LoopOrder::FeaturesOuter => {
            for g in 0..plan.groups.len() {
                for t in 0..plan.tiles.len() {
                    pass(&mut out, t, g, t == 0)?;
                }
            }
        }
    }
    Ok(out)
}

/// Streams of every layer, each terminated by a `BARRIER` carrying the
/// layer index.
pub fn emit_network(plans: &[TilePlan], layers: &[ConvLayerSpec]) -> Result<Vec<Command>, CommandError> {
    let mut out = Vec::new();
    for (i, (p, l)) in plans.iter().zip(layers).enumerate() {
        out.extend(emit_commands(p, l)?);
        out.push(Command::new(Opcode::Barrier, 0, 0, 0, i as u64)?);
    }
    Ok(out)
}

/// `KCMD`, a little-endian `u32` count, then one little-endian `u64` per
/// command.
pub fn write_command_stream(out: &mut impl Write, cmds: &[Command]) -> Result<(), CommandError> {
    out.write_all(&COMMAND_MAGIC)?;
    let count = checked("count", cmds.len() as u64, 32)? as u32;
    out.write_all(&count.to_le_bytes())?;
    for c in cmds {
        out.write_all(&c.encode().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_command_stream(input: &mut impl Read) -> Result<Vec<Command>, CommandError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(CommandError::Truncated { expected: 0, found: 0 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != COMMAND_MAGIC {
        return Err(CommandError::BadMagic(magic));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != count * 8 {
        return Err(CommandError::Truncated {
            expected: count,
            found: body.len() / 8,
        });
    }
    body.chunks_exact(8)
        .map(|c| Command::decode(u64::from_le_bytes(c.try_into().unwrap())))
        .collect()
}

/// 128-deep command queue fed from a stream held in DRAM. It is filled at
/// power-up and topped back up whenever it drains below the low-water mark.
#[derive(Debug, Clone)]
pub struct CommandFifo {
    queue: VecDeque<Command>,
    pending: VecDeque<Command>,
    depth: usize,
    low_water: usize,
    refills: usize,
    fetched: usize,
}

impl CommandFifo {
    pub fn new(stream: Vec<Command>) -> Self {
        Self::with_depth(stream, FIFO_DEPTH, FIFO_LOW_WATER)
    }

    pub fn with_depth(stream: Vec<Command>, depth: usize, low_water: usize) -> Self {
        assert!(depth > 0 && low_water < depth);
        let mut fifo = CommandFifo {
            queue: VecDeque::with_capacity(depth),
            pending: stream.into(),
            depth,
            low_water,
            refills: 0,
            fetched: 0,
        };
        fifo.refill();
        fifo
    }

    fn refill(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        self.refills += 1;
        while self.queue.len() < self.depth {
            match self.pending.pop_front() {
                Some(c) => {
                    self.queue.push_back(c);
                    self.fetched += 1;
                }
                None => break,
            }
        }
    }

    pub fn pop(&mut self) -> Option<Command> {
        let c = self.queue.pop_front()?;
        if self.queue.len() < self.low_water {
            self.refill();
        }
        Some(c)
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Batches loaded from DRAM, including the power-up fill.
    pub fn refills(&self) -> usize {
        self.refills
    }

    /// DRAM bytes read to fetch commands so far.
    pub fn fetched_bytes(&self) -> u64 {
        self.fetched as u64 * 8
    }
}

impl Iterator for CommandFifo {
    type Item = Command;

    fn next(&mut self) -> Option<Command> {
        self.pop()
    }
}
