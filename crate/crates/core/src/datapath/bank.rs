//! Single-port on-chip buffer bank.

use crate::fxp::Fx16;

use super::SimError;

/// Pixels per 16-byte SRAM word.
pub const WORD_PIXELS: usize = 8;

/// Number of 16-byte words needed for `pixels` Q8.8 values.
pub fn words_for(pixels: usize) -> u64 {
    pixels.div_ceil(WORD_PIXELS) as u64
}

/// Resident data class; each holds at most one region at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Input,
    Output,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    /// Offset in pixels.
    pub offset: usize,
    /// Length in pixels.
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// Storage for the buffer bank with first-fit placement of the three
/// resident regions. Port arbitration is modeled by the engine; this type
/// only enforces capacity.
#[derive(Debug, Clone)]
pub struct BufferBank {
    mem: Vec<Fx16>,
    slots: [Option<Region>; 3],
    peak_bytes: u64,
}

fn slot_index(s: Slot) -> usize {
    match s {
        Slot::Input => 0,
        Slot::Output => 1,
        Slot::Weights => 2,
    }
}

impl BufferBank {
    pub fn new(capacity_bytes: u64) -> Self {
        BufferBank {
            mem: vec![Fx16::ZERO; (capacity_bytes / 2) as usize],
            slots: [None; 3],
            peak_bytes: 0,
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.mem.len() as u64 * 2
    }

    pub fn live_bytes(&self) -> u64 {
        self.slots.iter().flatten().map(|r| r.len as u64 * 2).sum()
    }

    /// Highest live allocation seen so far.
    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn region(&self, slot: Slot) -> Option<Region> {
        self.slots[slot_index(slot)]
    }

    pub fn free(&mut self, slot: Slot) {
        self.slots[slot_index(slot)] = None;
    }

    /// Replace `slot`'s region with a fresh one of `pixels` elements.
    pub fn alloc(&mut self, slot: Slot, pixels: usize) -> Result<Region, SimError> {
        self.free(slot);
        let mut taken: Vec<Region> = self.slots.iter().flatten().copied().collect();
        taken.sort_by_key(|r| r.offset);
        let mut cursor = 0;
        let mut placed = None;
        for r in taken.iter().chain(std::iter::once(&Region {
            offset: self.mem.len(),
            len: 0,
        })) {
            if r.offset - cursor >= pixels {
                placed = Some(cursor);
                break;
            }
            cursor = cursor.max(r.end());
        }
        let Some(offset) = placed else {
            return Err(SimError::Capacity {
                need: pixels as u64 * 2,
                live: self.live_bytes(),
                capacity: self.capacity_bytes(),
            });
        };
        let region = Region { offset, len: pixels };
        self.slots[slot_index(slot)] = Some(region);
        self.peak_bytes = self.peak_bytes.max(self.live_bytes());
        Ok(region)
    }

    #[inline]
    pub fn get(&self, addr: usize) -> Fx16 {
        self.mem[addr]
    }

    #[inline]
    pub fn slice(&self, region: Region) -> &[Fx16] {
        &self.mem[region.offset..region.end()]
    }

    #[inline]
    pub fn slice_mut(&mut self, region: Region) -> &mut [Fx16] {
        &mut self.mem[region.offset..region.end()]
    }
}
