//! Blockwise scheduling: active block, working set with one-block lookahead,
//! and termination.

use crate::domain::{Canvas, DecodeConfig, Vocabulary};

/// The positions a step may read and commit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub block_size: usize,
    pub active_block: usize,
    /// Ascending generation positions.
    pub working_set: Vec<usize>,
    pub expanded: bool,
}

impl BlockPlan {
    /// Masked members of the working set in `canvas`.
    pub fn masked(&self, canvas: &Canvas) -> Vec<usize> {
        canvas.masked_set(self.working_set.iter().copied())
    }

    pub fn block_of(&self, pos: usize) -> usize {
        pos / self.block_size
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("canvas has no masked position")]
pub struct NoMaskError;

/// Active block is the first with a mask. When it holds at most
/// `n_sparsity` masks and is not the last block, every position of the next
/// block joins the working set.
pub fn working_set<P>(canvas: &Canvas, cfg: &DecodeConfig<P>) -> Result<BlockPlan, NoMaskError> {
    let s = cfg.block_size;
    let first = canvas
        .gen()
        .iter()
        .position(|&t| t == canvas.mask_id())
        .ok_or(NoMaskError)?;
    let k = first / s;
    let block_end = ((k + 1) * s).min(canvas.len());
    let mut ws = canvas.masked_set(k * s..block_end);
    let has_next = block_end < canvas.len();
    let expanded = has_next && ws.len() <= cfg.n_sparsity;
    if expanded {
        ws.extend(block_end..(block_end + s).min(canvas.len()));
    }
    Ok(BlockPlan {
        block_size: s,
        active_block: k,
        working_set: ws,
        expanded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Continue,
    /// Position of the end-of-sequence token that ends a fully resolved prefix.
    Truncate(usize),
    Done,
}

pub fn check_termination(canvas: &Canvas, vocab: &Vocabulary) -> Termination {
    if canvas.is_resolved() {
        return Termination::Done;
    }
    let mask = canvas.mask_id();
    canvas
        .gen()
        .iter()
        .take_while(|&&t| t != mask)
        .position(|&t| t == vocab.eos_id())
        .map_or(Termination::Continue, Termination::Truncate)
}
