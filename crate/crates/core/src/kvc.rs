//! Paged KV-cache block manager.
//!
//! Capacity is tracked in fixed-size blocks of `block_size` tokens. Each
//! resident request holds `⌈tokens_stored / b⌉` blocks. Preempted requests
//! are swapped out: their blocks return to the pool and their token count
//! is remembered until they are re-admitted.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::workload::RequestId;

pub const DEFAULT_BLOCK_SIZE: usize = 32;

/// Work a request wants to run in the next iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Work {
    /// `len` prompt tokens; `first` marks the first chunk (or whole prompt).
    PromptChunk { len: usize, first: bool },
    /// One generation step, storing one token.
    Decode,
}

impl Work {
    pub fn tokens(&self) -> usize {
        match *self {
            Work::PromptChunk { len, .. } => len,
            Work::Decode => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KvcDemand {
    /// Tokens that will be stored once the work runs.
    pub tokens_needed: usize,
    pub blocks_needed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Residency {
    pub blocks_held: usize,
    pub tokens_stored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockPool {
    block_size: usize,
    total_blocks: usize,
    free_blocks: usize,
    resident: BTreeMap<RequestId, Residency>,
    swapped_out: BTreeMap<RequestId, usize>,
}

impl BlockPool {
    pub fn new(total_blocks: usize, block_size: usize) -> Self {
        assert!(block_size >= 1, "block size must be positive");
        BlockPool {
            block_size,
            total_blocks,
            free_blocks: total_blocks,
            resident: BTreeMap::new(),
            swapped_out: BTreeMap::new(),
        }
    }

    /// Pool holding `⌊capacity_tokens / b⌋` blocks.
    pub fn from_capacity_tokens(capacity_tokens: usize, block_size: usize) -> Self {
        Self::new(capacity_tokens / block_size, block_size)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn total_blocks(&self) -> usize {
        self.total_blocks
    }

    pub fn free_blocks(&self) -> usize {
        self.free_blocks
    }

    pub fn capacity_tokens(&self) -> usize {
        self.total_blocks.saturating_mul(self.block_size)
    }

    /// Paged allocation in tokens: `Σ ⌈S_l/b⌉·b` over resident requests.
    pub fn allocated_tokens(&self) -> usize {
        (self.total_blocks - self.free_blocks) * self.block_size
    }

    pub fn residency(&self, id: RequestId) -> Option<Residency> {
        self.resident.get(&id).copied()
    }

    pub fn is_resident(&self, id: RequestId) -> bool {
        self.resident.contains_key(&id)
    }

    pub fn swapped_tokens(&self, id: RequestId) -> Option<usize> {
        self.swapped_out.get(&id).copied()
    }

    pub fn resident_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.resident.keys().copied()
    }

    pub fn blocks_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.block_size)
    }

    /// Free slots inside the blocks already held by `id`.
    pub fn headroom(&self, id: RequestId) -> usize {
        self.resident
            .get(&id)
            .map(|r| r.blocks_held * self.block_size - r.tokens_stored)
            .unwrap_or(0)
    }

    /// KV-cache demand of running `work` for request `id`.
    ///
    /// * fresh first chunk or whole prompt: `⌈len/b⌉` blocks;
    /// * resident request: only tokens beyond the current headroom;
    /// * swapped-out request: every saved token plus the new work.
    pub fn demand(&self, id: RequestId, work: Work) -> Result<KvcDemand> {
        let tokens = work.tokens();
        let blocks_needed = if let Some(saved) = self.swapped_out.get(&id) {
            self.blocks_for(saved + tokens)
        } else if self.resident.contains_key(&id) {
            self.blocks_for(tokens.saturating_sub(self.headroom(id)))
        } else {
            match work {
                Work::PromptChunk { first: true, .. } => self.blocks_for(tokens),
                _ => {
                    return Err(Error::State(format!(
                        "request {id} has no cached context for {work:?}"
                    )))
                }
            }
        };
        Ok(KvcDemand {
            tokens_needed: tokens,
            blocks_needed,
        })
    }

    /// Largest prompt chunk for `id` whose demand fits in `blocks` free
    /// blocks.
    pub fn max_chunk_within(&self, id: RequestId, blocks: usize) -> usize {
        let room = blocks.saturating_mul(self.block_size);
        if let Some(saved) = self.swapped_out.get(&id) {
            room.saturating_sub(*saved)
        } else {
            room.saturating_add(self.headroom(id))
        }
    }

    /// Commits `demand` (as returned by [`BlockPool::demand`]) for `work`.
    pub fn allocate(&mut self, id: RequestId, work: Work, demand: KvcDemand) -> Result<()> {
        let expected = self.demand(id, work)?;
        if expected != demand {
            return Err(Error::State(format!(
                "stale demand for request {id}: {demand:?} vs current {expected:?}"
            )));
        }
        if demand.blocks_needed > self.free_blocks {
            return Err(Error::AllocationFailure {
                needed: demand.blocks_needed,
                free: self.free_blocks,
            });
        }
        self.free_blocks -= demand.blocks_needed;
        let saved = self.swapped_out.remove(&id).unwrap_or(0);
        let entry = self.resident.entry(id).or_insert(Residency {
            blocks_held: 0,
            tokens_stored: saved,
        });
        entry.blocks_held += demand.blocks_needed;
        entry.tokens_stored += demand.tokens_needed;
        debug_assert!(entry.tokens_stored <= entry.blocks_held * self.block_size);
        Ok(())
    }

    /// Frees every block of a resident request. Returns the blocks freed.
    pub fn release(&mut self, id: RequestId) -> Result<usize> {
        let r = self
            .resident
            .remove(&id)
            .ok_or_else(|| Error::State(format!("release of non-resident request {id}")))?;
        self.free_blocks += r.blocks_held;
        Ok(r.blocks_held)
    }

    /// Swaps a resident request out. Returns the number of tokens saved,
    /// which the engine charges as swap latency.
    pub fn preempt(&mut self, id: RequestId) -> Result<usize> {
        let r = self
            .resident
            .remove(&id)
            .ok_or_else(|| Error::State(format!("preempt of non-resident request {id}")))?;
        self.free_blocks += r.blocks_held;
        self.swapped_out.insert(id, r.tokens_stored);
        Ok(r.tokens_stored)
    }

    /// Checks every structural invariant of the pool.
    pub fn check_invariants(&self) -> Result<(), String> {
        let held: usize = self.resident.values().map(|r| r.blocks_held).sum();
        if self.free_blocks + held != self.total_blocks {
            return Err(format!(
                "conservation broken: free {} + held {held} != total {}",
                self.free_blocks, self.total_blocks
            ));
        }
        for (id, r) in &self.resident {
            let b = self.block_size;
            if r.blocks_held != r.tokens_stored.div_ceil(b) {
                return Err(format!(
                    "request {id}: {} blocks for {} tokens",
                    r.blocks_held, r.tokens_stored
                ));
            }
            if self.swapped_out.contains_key(id) {
                return Err(format!("request {id} is both resident and swapped out"));
            }
        }
        Ok(())
    }
}

/// KV-cache space a max-length reservation scheme sets aside for a batch.
pub fn orca_reservation(batch_size: usize, max_seq_len: usize) -> usize {
    batch_size * max_seq_len
}
