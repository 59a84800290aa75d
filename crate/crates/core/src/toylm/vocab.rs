//! Token-id layout for the grid-QA task, and the prompt span layout.
//!
//! Prompt encoding: `[SYS] x N_SYS`, then one visual token per grid cell,
//! then `[Q] ROW_r COL_c [A]`; the answer is a single symbol token.
//!
//! A visual token encodes (cell, symbol) jointly — the stand-in for a
//! vision encoder whose patch embeddings carry their own spatial identity.
//! That is what makes the visual span prunable: a kept token still knows
//! which cell it came from after its neighbours are dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// System-prompt span length.
pub const N_SYS: usize = 2;
/// Instruction span length: `[Q] ROW COL [A]`.
pub const N_INSTR: usize = 4;

/// Span offsets partitioning a prompt into system / visual / instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub n_sys: usize,
    pub n_vis: usize,
    pub n_instr: usize,
}

impl PromptLayout {
    pub fn new(n_sys: usize, n_vis: usize, n_instr: usize) -> Result<Self> {
        if n_sys == 0 || n_vis == 0 || n_instr == 0 {
            return Err(Error::InvalidArg(format!(
                "every prompt span must be nonempty, got ({n_sys}, {n_vis}, {n_instr})"
            )));
        }
        Ok(PromptLayout { n_sys, n_vis, n_instr })
    }

    pub fn total(&self) -> usize {
        self.n_sys + self.n_vis + self.n_instr
    }

    /// Absolute index range of the visual span.
    pub fn visual_range(&self) -> std::ops::Range<usize> {
        self.n_sys..self.n_sys + self.n_vis
    }

    /// Absolute index range of the instruction span.
    pub fn instruction_range(&self) -> std::ops::Range<usize> {
        self.n_sys + self.n_vis..self.total()
    }
}

/// Token-id assignment for a `(grid_size, n_symbols)` task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub grid_size: usize,
    pub n_symbols: usize,
}

impl Vocab {
    pub fn new(grid_size: usize, n_symbols: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::InvalidArg(format!("grid_size must be >= 2, got {grid_size}")));
        }
        if n_symbols < 2 {
            return Err(Error::InvalidArg(format!("n_symbols must be >= 2, got {n_symbols}")));
        }
        Ok(Vocab { grid_size, n_symbols })
    }

    pub fn n_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Answer-symbol token; these occupy ids `0..n_symbols`.
    pub fn symbol(&self, s: usize) -> u32 {
        debug_assert!(s < self.n_symbols);
        s as u32
    }

    /// Visual token for `symbol` at `cell` (row-major cell index).
    pub fn visual(&self, cell: usize, symbol: usize) -> u32 {
        debug_assert!(cell < self.n_cells() && symbol < self.n_symbols);
        (self.n_symbols + cell * self.n_symbols + symbol) as u32
    }

    fn coord_base(&self) -> usize {
        self.n_symbols * (1 + self.n_cells())
    }

    pub fn row(&self, r: usize) -> u32 {
        debug_assert!(r < self.grid_size);
        (self.coord_base() + r) as u32
    }

    pub fn col(&self, c: usize) -> u32 {
        debug_assert!(c < self.grid_size);
        (self.coord_base() + self.grid_size + c) as u32
    }

    pub fn sys(&self) -> u32 {
        (self.coord_base() + 2 * self.grid_size) as u32
    }

    pub fn query(&self) -> u32 {
        self.sys() + 1
    }

    pub fn answer_marker(&self) -> u32 {
        self.sys() + 2
    }

    /// Number of ids the task needs: symbols, per-cell visual tokens,
    /// coordinates, and the three markers.
    pub fn required_vocab_size(&self) -> usize {
        self.coord_base() + 2 * self.grid_size + 3
    }

    /// Reject an LM vocabulary that cannot encode this task.
    pub fn check_fits(&self, vocab_size: usize) -> Result<()> {
        let needed = self.required_vocab_size();
        if vocab_size < needed {
            return Err(Error::InvalidArg(format!(
                "vocab too small: task needs {needed} ids (symbols + coordinates + markers), LM has {vocab_size}"
            )));
        }
        Ok(())
    }
}
