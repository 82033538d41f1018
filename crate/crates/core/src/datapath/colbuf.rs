//! Column buffer: two stored rows plus the row currently streaming in,
//! remapped into 3x3 windows.
//!
//! The stream delivers one 8-pixel word per cycle. The windows emitted while
//! word `w` of a row arrives are those whose right edge falls inside that
//! word, i.e. column positions `8w-2 .. 8w+6`. Their two left columns come
//! from the previous word, which is already stored, so no look-ahead is
//! needed and every position of a row is produced exactly once.

use crate::fxp::Fx16;

use super::bank::WORD_PIXELS;

/// Window side of the CU engines.
pub const WINDOW: usize = 3;

#[derive(Debug, Clone)]
pub struct ColumnBuffer {
    rows: [Vec<Fx16>; WINDOW],
    /// Ring index of the row currently streaming.
    current: usize,
    row_len: usize,
    rows_seen: usize,
}

impl ColumnBuffer {
    pub fn new() -> Self {
        ColumnBuffer {
            rows: [Vec::new(), Vec::new(), Vec::new()],
            current: 0,
            row_len: 0,
            rows_seen: 0,
        }
    }

    /// Size the row storage for rows of `row_len` pixels and forget any
    /// buffered data.
    pub fn reset(&mut self, row_len: usize) {
        for r in &mut self.rows {
            r.clear();
            r.resize(row_len, Fx16::ZERO);
        }
        self.row_len = row_len;
        self.current = WINDOW - 1;
        self.rows_seen = 0;
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    /// Words needed to stream one row.
    pub fn words_per_row(&self) -> usize {
        self.row_len.div_ceil(WORD_PIXELS)
    }

    /// Rotate so the oldest stored row receives the next streamed row.
    pub fn begin_row(&mut self) {
        self.current = (self.current + 1) % WINDOW;
        self.rows_seen += 1;
    }

    /// Store word `w` of the current row.
    pub fn write_word(&mut self, w: usize, pixels: &[Fx16]) {
        let start = w * WORD_PIXELS;
        self.rows[self.current][start..start + pixels.len()].copy_from_slice(pixels);
    }

    /// True once enough rows are buffered for a full window.
    pub fn warm(&self) -> bool {
        self.rows_seen >= WINDOW
    }

    /// Window row `i` (0 = oldest) of the window anchored at column `p`.
    #[inline]
    pub fn window_row(&self, i: usize) -> &[Fx16] {
        &self.rows[(self.current + 1 + i) % WINDOW]
    }

    /// Column positions whose window completes with word `w`.
    pub fn positions_for_word(&self, w: usize) -> std::ops::Range<usize> {
        let last = self.row_len.saturating_sub(WINDOW - 1);
        let lo = (w * WORD_PIXELS).saturating_sub(WINDOW - 1).min(last);
        let hi = (w * WORD_PIXELS + WORD_PIXELS).saturating_sub(WINDOW - 1).min(last);
        lo..hi
    }

    /// Full 3x3 window at column `p`, row-major.
    pub fn window(&self, p: usize) -> [Fx16; WINDOW * WINDOW] {
        let mut out = [Fx16::ZERO; WINDOW * WINDOW];
        for i in 0..WINDOW {
            out[i * WINDOW..(i + 1) * WINDOW].copy_from_slice(&self.window_row(i)[p..p + WINDOW]);
        }
        out
    }
}

impl Default for ColumnBuffer {
    fn default() -> Self {
        Self::new()
    }
}
