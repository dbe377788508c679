//! First-come-first-served reference policies.

use std::collections::HashSet;

use crate::kvc::Work;
use crate::sched_core::QueueEntry;

use super::{
    demand_for, BatchPlan, PlanContext, PolicyConfig, PreemptReason, Preemption, Selection,
};

fn fcfs_sort(queue: &mut [QueueEntry]) {
    queue.sort_by(|a, b| {
        a.arrival_time
            .total_cmp(&b.arrival_time)
            .then(a.request_id.cmp(&b.request_id))
    });
}

fn prompt_selection(e: &QueueEntry, len: usize) -> Selection {
    Selection {
        request_id: e.request_id,
        chunk_len: len,
        is_final_chunk: len == e.remaining_prompt,
        is_prompt: true,
    }
}

fn decode_selection(e: &QueueEntry) -> Selection {
    Selection {
        request_id: e.request_id,
        chunk_len: 1,
        is_final_chunk: true,
        is_prompt: false,
    }
}

/// Shared bookkeeping while a baseline fills a batch.
struct Fill<'q> {
    queue: &'q [QueueEntry],
    plan: BatchPlan,
    free: usize,
    done: HashSet<usize>,
    evicted: HashSet<usize>,
}

impl<'q> Fill<'q> {
    fn new(queue: &'q [QueueEntry], free: usize, budget: usize) -> Self {
        Fill {
            queue,
            plan: BatchPlan::empty(budget),
            free,
            done: HashSet::new(),
            evicted: HashSet::new(),
        }
    }

    fn take(&mut self, i: usize, sel: Selection, blocks: usize) {
        self.free -= blocks;
        self.done.insert(i);
        self.plan.push(sel);
    }

    fn evict(&mut self, ctx_pool: &crate::kvc::BlockPool, i: usize) {
        let id = self.queue[i].request_id;
        self.free += ctx_pool.residency(id).map_or(0, |r| r.blocks_held);
        self.evicted.insert(i);
        self.plan.preempted.push(Preemption {
            request_id: id,
            reason: PreemptReason::Capacity,
            swap_out: true,
        });
    }

    fn open(&self, i: usize) -> bool {
        !self.done.contains(&i) && !self.evicted.contains(&i)
    }
}

/// Generation steps for every resident request in arrival order. When the
/// cache runs out, the latest-arriving resident that has not been scheduled
/// yet is swapped out, which may be the requester itself.
fn resident_decodes(fill: &mut Fill<'_>, ctx: &PlanContext<'_>, token_limit: usize) {
    let queue = fill.queue;
    let pool = ctx.pool;
    let residents: Vec<usize> = (0..queue.len())
        .filter(|&i| pool.is_resident(queue[i].request_id))
        .collect();
    for &i in &residents {
        if !fill.open(i) || queue[i].is_prompt() {
            continue;
        }
        if fill.plan.forward_size >= token_limit {
            break;
        }
        let need = demand_for(pool, &queue[i], 1).blocks_needed;
        while need > fill.free {
            let victim = residents
                .iter()
                .rev()
                .copied()
                .find(|&j| j != i && fill.open(j));
            fill.evict(pool, victim.unwrap_or(i));
            if victim.is_none() {
                break;
            }
        }
        if fill.open(i) {
            fill.take(i, decode_selection(&queue[i]), need);
        }
    }
}

/// Whole prompts, paged KV cache, swap-out preemption. Prompt tokens per
/// iteration are capped, but the first prompt is always admitted.
pub fn paged_fcfs_plan(cfg: &PolicyConfig, ctx: &mut PlanContext<'_>) -> BatchPlan {
    fcfs_sort(ctx.queue);
    let cap = cfg.budget_cap.resolve(ctx.profile).unwrap_or(usize::MAX);
    let pool = ctx.pool;
    let queue: &[QueueEntry] = ctx.queue;
    let mut fill = Fill::new(queue, pool.free_blocks(), cap);
    resident_decodes(&mut fill, ctx, usize::MAX);

    let mut prompt_tokens = 0usize;
    let mut blocked = !fill.plan.preempted.is_empty();
    if !blocked {
        for i in (0..queue.len()).filter(|&i| pool.swapped_tokens(queue[i].request_id).is_some()) {
            let e = &queue[i];
            let len = e.remaining_prompt.max(1);
            let need = demand_for(pool, e, len).blocks_needed;
            let over_cap = e.is_prompt() && prompt_tokens > 0 && prompt_tokens + len > cap;
            if need > fill.free || over_cap {
                blocked = true;
                break;
            }
            if e.is_prompt() {
                prompt_tokens += len;
                fill.take(i, prompt_selection(e, len), need);
            } else {
                fill.take(i, decode_selection(e), need);
            }
        }
    }
    if !blocked {
        for (i, e) in queue.iter().enumerate() {
            let id = e.request_id;
            if !fill.open(i) || pool.is_resident(id) || pool.swapped_tokens(id).is_some() {
                continue;
            }
            let len = e.remaining_prompt;
            let need = demand_for(pool, e, len).blocks_needed;
            if need > fill.free || (prompt_tokens > 0 && prompt_tokens + len > cap) {
                break;
            }
            prompt_tokens += len;
            fill.take(i, prompt_selection(e, len), need);
        }
    }
    let mut plan = fill.plan;
    plan.token_budget = cap.max(plan.forward_size);
    plan
}

/// Generation steps first, then fixed-length prompt chunks in arrival order
/// until the next one would exceed the token budget or the free cache.
pub fn static_chunk_plan(cfg: &PolicyConfig, ctx: &mut PlanContext<'_>) -> BatchPlan {
    fcfs_sort(ctx.queue);
    let budget = cfg.budget_cap.resolve(ctx.profile).unwrap_or(usize::MAX);
    let pool = ctx.pool;
    let queue: &[QueueEntry] = ctx.queue;
    let mut fill = Fill::new(queue, pool.free_blocks(), budget);
    resident_decodes(&mut fill, ctx, budget);
    let admit_new = fill.plan.preempted.is_empty();

    for (i, e) in queue.iter().enumerate() {
        if !fill.open(i) || (!pool.is_resident(e.request_id) && !admit_new) {
            continue;
        }
        let (sel, len) = if e.is_prompt() {
            // A fixed chunk above the budget could never run.
            let len = e.remaining_prompt.min(cfg.static_chunk_len.min(budget));
            (prompt_selection(e, len), len)
        } else {
            (decode_selection(e), 1)
        };
        let need = demand_for(pool, e, len).blocks_needed;
        if fill.plan.forward_size + len > budget || need > fill.free {
            break;
        }
        fill.take(i, sel, need);
    }
    let mut plan = fill.plan;
    plan.token_budget = budget.max(plan.forward_size);
    plan
}

/// Whole prompts in arrival order with a bounded batch. Every admitted
/// request reserves KV space for its maximum sequence length up front and
/// is never preempted.
pub fn orca_plan(cfg: &PolicyConfig, ctx: &mut PlanContext<'_>) -> BatchPlan {
    fcfs_sort(ctx.queue);
    let cap = cfg.budget_cap.resolve(ctx.profile).unwrap_or(usize::MAX);
    let pool = ctx.pool;
    let queue: &[QueueEntry] = ctx.queue;
    let total = pool.total_blocks();
    let reservation = |e: &QueueEntry| {
        let tokens = cfg.orca_max_seq.max(e.prompt_len + e.predicted_output_len);
        pool.blocks_for(tokens).min(total)
    };

    let mut fill = Fill::new(queue, pool.free_blocks(), cap);
    let mut admitted = 0usize;
    let mut reserved = 0usize;
    for (i, e) in queue.iter().enumerate() {
        if !pool.is_resident(e.request_id) {
            continue;
        }
        admitted += 1;
        reserved += reservation(e);
        let need = demand_for(pool, e, 1).blocks_needed;
        if !e.is_prompt() && need <= fill.free {
            fill.take(i, decode_selection(e), need);
        }
    }
    for (i, e) in queue.iter().enumerate() {
        if pool.is_resident(e.request_id) {
            continue;
        }
        if admitted >= cfg.orca_batch_size {
            break;
        }
        let r = reservation(e);
        let work = Work::PromptChunk {
            len: e.remaining_prompt,
            first: true,
        };
        let Ok(d) = pool.demand(e.request_id, work) else {
            continue;
        };
        if reserved + r > total || d.blocks_needed > fill.free {
            break;
        }
        admitted += 1;
        reserved += r;
        fill.take(i, prompt_selection(e, e.remaining_prompt), d.blocks_needed);
    }
    let mut plan = fill.plan;
    plan.token_budget = cap.max(plan.forward_size);
    plan.reserved_kvc_tokens = Some(reserved * pool.block_size());
    plan
}
