use std::collections::BTreeMap;

use crate::kvc::{BlockPool, Work};
use crate::sched_core::{is_urgent, order_queue, remaining_time, ChunkStats, QueueEntry};
use crate::workload::RequestId;

use super::{
    demand_for, dynamic_chunk, token_budget, BatchPlan, EraScope, PlanContext, PlanDiagnostics,
    PolicyConfig, PreemptReason, Preemption, Selection,
};

/// Limits how many long prompts may be in prefill at once.
#[derive(Debug, Clone)]
pub struct EraGate {
    limit: Option<usize>,
    active: usize,
}

impl EraGate {
    pub fn new(limit: Option<usize>, active: usize) -> Self {
        EraGate { limit, active }
    }

    /// Gate state implied by the queue contents.
    pub fn from_queue(cfg: &PolicyConfig, queue: &[QueueEntry]) -> Self {
        let active = queue
            .iter()
            .filter(|e| match cfg.era_scope {
                EraScope::Prefill => e.is_active_long_prefill(),
                EraScope::FullJob => e.is_long && e.remaining_prompt < e.prompt_len,
            })
            .count();
        EraGate::new(cfg.max_concurrent_long, active)
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn admits(&self, starts_long: bool) -> bool {
        !starts_long || self.limit.is_none_or(|l| self.active < l)
    }

    fn start(&mut self, starts_long: bool) {
        if starts_long {
            self.active += 1;
        }
    }
}

/// Whether scheduling `entry` would open a new long-prompt prefill.
fn starts_long(entry: &QueueEntry) -> bool {
    entry.is_long && entry.remaining_prompt == entry.prompt_len && entry.prompt_len > 0
}

/// A non-urgent entry eligible for multi-resource selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub request_id: RequestId,
    /// Queue position; earlier wins distance ties.
    pub position: usize,
    /// Remaining prompt tokens, 0 for a generation step.
    pub remaining_prompt: usize,
    /// The request holds no cached context yet.
    pub first_chunk: bool,
    pub starts_long: bool,
}

impl Candidate {
    pub fn from_entry(entry: &QueueEntry, position: usize, pool: &BlockPool) -> Self {
        let id = entry.request_id;
        Candidate {
            request_id: id,
            position,
            remaining_prompt: entry.remaining_prompt,
            first_chunk: !pool.is_resident(id) && pool.swapped_tokens(id).is_none(),
            starts_long: starts_long(entry),
        }
    }

    fn work(&self, len: usize) -> Work {
        if self.remaining_prompt > 0 {
            Work::PromptChunk {
                len,
                first: self.first_chunk,
            }
        } else {
            Work::Decode
        }
    }
}

/// One entry chosen by [`select_requests`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pick {
    pub request_id: RequestId,
    pub position: usize,
    /// Tokens of GPU budget used (`D_c`).
    pub chunk_len: usize,
    /// KV-cache tokens used (`D_m`), a whole number of blocks.
    pub kv_tokens: usize,
    pub is_prompt: bool,
}

fn sq_distance(a_c: usize, d_c: usize, a_m: usize, d_m: usize) -> u128 {
    let dc = (a_c - d_c) as u128;
    let dm = (a_m - d_m) as u128;
    dc * dc + dm * dm
}

/// Repeatedly picks the candidate whose demand vector lies closest to the
/// available `(GPU tokens, KV tokens)` vector, until nothing fits.
///
/// Prompts take a dynamic chunk `min(S_r, A_c, KV fit)`; a generation step
/// takes one token. Ties go to the earlier queue position.
pub fn select_requests(
    a_gpu: usize,
    a_kv_tokens: usize,
    candidates: &[Candidate],
    pool: &BlockPool,
    era: &mut EraGate,
) -> Vec<Pick> {
    let b = pool.block_size();
    let (mut a_c, mut a_m) = (a_gpu, a_kv_tokens);

    // Generation steps with the same block demand are interchangeable
    // apart from position, so only the front of each class competes.
    let mut decode_classes: BTreeMap<usize, std::collections::VecDeque<&Candidate>> =
        BTreeMap::new();
    let mut prompts: Vec<&Candidate> = Vec::new();
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.position);
    for c in sorted {
        if c.remaining_prompt == 0 {
            let blocks = pool
                .demand(c.request_id, Work::Decode)
                .map(|d| d.blocks_needed)
                .unwrap_or(usize::MAX);
            decode_classes.entry(blocks).or_default().push_back(c);
        } else {
            prompts.push(c);
        }
    }

    let mut picks = Vec::new();
    loop {
        // (distance, position, source, d_c, d_m)
        let mut best: Option<(u128, usize, Source, usize, usize)> = None;
        let mut consider = |dist: u128, pos: usize, src: Source, d_c: usize, d_m: usize| {
            if best.is_none_or(|(bd, bp, ..)| (dist, pos) < (bd, bp)) {
                best = Some((dist, pos, src, d_c, d_m));
            }
        };
        if a_c >= 1 {
            for (&blocks, class) in &decode_classes {
                let Some(front) = class.front() else { continue };
                let d_m = blocks.saturating_mul(b);
                if d_m <= a_m {
                    consider(
                        sq_distance(a_c, 1, a_m, d_m),
                        front.position,
                        Source::Decode(blocks),
                        1,
                        d_m,
                    );
                }
            }
            for (k, c) in prompts.iter().enumerate() {
                if !era.admits(c.starts_long) {
                    continue;
                }
                let kv_fit = pool.max_chunk_within(c.request_id, a_m / b);
                let len = dynamic_chunk(c.remaining_prompt, a_c.min(kv_fit));
                if len == 0 {
                    continue;
                }
                let Ok(d) = pool.demand(c.request_id, c.work(len)) else {
                    continue;
                };
                let d_m = d.blocks_needed * b;
                debug_assert!(d_m <= a_m);
                consider(
                    sq_distance(a_c, len, a_m, d_m),
                    c.position,
                    Source::Prompt(k),
                    len,
                    d_m,
                );
            }
        }
        let Some((_, position, src, d_c, d_m)) = best else {
            break;
        };
        let cand = match src {
            Source::Decode(blocks) => {
                let class = decode_classes.get_mut(&blocks).expect("class exists");
                class.pop_front().expect("class is non-empty")
            }
            Source::Prompt(k) => {
                let c = prompts.remove(k);
                era.start(c.starts_long);
                c
            }
        };
        a_c -= d_c;
        a_m -= d_m;
        picks.push(Pick {
            request_id: cand.request_id,
            position,
            chunk_len: d_c,
            kv_tokens: d_m,
            is_prompt: cand.remaining_prompt > 0,
        });
    }
    picks
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Decode(usize),
    Prompt(usize),
}

struct Member {
    idx: usize,
    len: usize,
}

/// Remaining-time ordered planning with dynamic chunking.
///
/// 1. Order the queue by remaining time; entries at or below the urgency
///    threshold must run now.
/// 2. Size the token budget from the iteration SLO of the queue head.
/// 3. Admit resident urgent generation steps, preempting the one with the
///    most slack until GPU budget and KV cache fit; then swapped-out ones
///    that fit in free space; then urgent prompts get chunks from the room
///    left.
/// 4. Fill what is left from the non-urgent entries within `γ` of the head
///    by multi-resource selection.
pub fn accelgen_plan(cfg: &PolicyConfig, ctx: &mut PlanContext<'_>) -> BatchPlan {
    let (pool, stats, profile) = (ctx.pool, ctx.stats, ctx.profile);
    let cap = cfg.budget_cap.resolve(profile);
    if ctx.queue.is_empty() {
        return BatchPlan::empty(token_budget(profile.pivot_time, profile, cap));
    }
    let remaining = order_queue(ctx.queue, ctx.now, stats);
    let queue: &[QueueEntry] = ctx.queue;
    let n_urgent = remaining
        .iter()
        .take_while(|&&t| is_urgent(t, stats, cfg.urgency_slack))
        .count();

    // The head has the most stringent deadline; the budget is fixed from
    // it and not revised as members are added.
    let budget = token_budget(queue[0].iteration_slo(stats), profile, cap);

    let mut plan = BatchPlan::empty(budget);
    plan.diagnostics = PlanDiagnostics {
        queue_remaining: remaining.clone(),
        urgent: queue[..n_urgent].iter().map(|e| e.request_id).collect(),
    };

    let mut era = EraGate::from_queue(cfg, queue);
    let blocks_of = |m: &Member| demand_for(pool, &queue[m.idx], m.len).blocks_needed;

    // While anything is swapped out, no new request is admitted, so freed
    // blocks go to swap-ins first.
    let is_fresh = |e: &QueueEntry| {
        !pool.is_resident(e.request_id) && pool.swapped_tokens(e.request_id).is_none()
    };
    let fresh_blocked = queue
        .iter()
        .any(|e| pool.swapped_tokens(e.request_id).is_some());

    // Resident urgent generation steps first: their demand is fixed.
    // While they overrun the budget or the free cache, the one with the
    // most slack (furthest back in remaining-time order) is preempted.
    let mut members: Vec<Member> = (0..n_urgent)
        .filter(|&i| !queue[i].is_prompt() && pool.is_resident(queue[i].request_id))
        .map(|i| Member { idx: i, len: 1 })
        .collect();
    let mut free = pool.free_blocks();
    let mut used_c = members.len();
    let mut used_b: usize = members.iter().map(blocks_of).sum();
    while used_c > budget || used_b > free {
        let m = members.pop().expect("an overrun implies members");
        let id = queue[m.idx].request_id;
        let own = blocks_of(&m);
        let swap_out = used_b > free;
        used_c -= 1;
        used_b -= own;
        if swap_out {
            free += pool.residency(id).map_or(0, |r| r.blocks_held);
        }
        plan.preempted.push(Preemption {
            request_id: id,
            reason: PreemptReason::Capacity,
            swap_out,
        });
    }
    let defer = |plan: &mut BatchPlan, i: usize, reason| {
        plan.preempted.push(Preemption {
            request_id: queue[i].request_id,
            reason,
            swap_out: false,
        })
    };

    // Swapped-out urgent generation steps come back only into free space.
    for i in
        (0..n_urgent).filter(|&i| !queue[i].is_prompt() && !pool.is_resident(queue[i].request_id))
    {
        let m = Member { idx: i, len: 1 };
        let need = blocks_of(&m);
        if used_c < budget && used_b + need <= free {
            used_c += 1;
            used_b += need;
            members.push(m);
        } else {
            defer(&mut plan, i, PreemptReason::Capacity);
        }
    }

    // Urgent prompts take chunks from what is left, in remaining-time
    // order; one that gets no room waits for the next iteration.
    for i in (0..n_urgent).filter(|&i| queue[i].is_prompt()) {
        let e = &queue[i];
        let long = starts_long(e);
        if fresh_blocked && is_fresh(e) {
            defer(&mut plan, i, PreemptReason::Capacity);
            continue;
        }
        if !era.admits(long) {
            defer(&mut plan, i, PreemptReason::Era);
            continue;
        }
        let room_c = budget - used_c;
        let room_kv = pool.max_chunk_within(e.request_id, free - used_b);
        let len = dynamic_chunk(e.remaining_prompt, room_c.min(room_kv));
        if len == 0 {
            defer(&mut plan, i, PreemptReason::Capacity);
            continue;
        }
        era.start(long);
        let m = Member { idx: i, len };
        used_c += m.len;
        used_b += blocks_of(&m);
        members.push(m);
    }
    debug_assert!(used_c <= budget && used_b <= free);

    for m in &members {
        let e = &queue[m.idx];
        plan.push(Selection {
            request_id: e.request_id,
            chunk_len: m.len,
            is_final_chunk: !e.is_prompt() || m.len == e.remaining_prompt,
            is_prompt: e.is_prompt(),
        });
    }

    if n_urgent < queue.len() {
        let head = remaining[n_urgent];
        let candidates: Vec<Candidate> = (n_urgent..queue.len())
            .take_while(|&i| remaining[i] <= head + cfg.gamma)
            .filter(|&i| !(fresh_blocked && is_fresh(&queue[i])))
            .map(|i| Candidate::from_entry(&queue[i], i, pool))
            .collect();
        let a_c = budget - used_c;
        let a_m = (free - used_b).saturating_mul(pool.block_size());
        for p in select_requests(a_c, a_m, &candidates, pool, &mut era) {
            let e = &queue[p.position];
            plan.push(Selection {
                request_id: p.request_id,
                chunk_len: p.chunk_len,
                is_final_chunk: !p.is_prompt || p.chunk_len == e.remaining_prompt,
                is_prompt: p.is_prompt,
            });
        }
    }
    // Nothing fits: partially cached requests hold the whole cache. Swap
    // out the resident entry with the most slack so another can proceed.
    if plan.selections.is_empty() && !plan.preempted.iter().any(|p| p.swap_out) {
        let resident: Vec<usize> = (0..queue.len())
            .filter(|&i| pool.is_resident(queue[i].request_id))
            .collect();
        if let [_, .., last] = resident[..] {
            let id = queue[last].request_id;
            plan.preempted.retain(|p| p.request_id != id);
            plan.preempted.push(Preemption {
                request_id: id,
                reason: PreemptReason::Capacity,
                swap_out: true,
            });
        }
    }
    let by_id: std::collections::HashMap<RequestId, usize> = queue
        .iter()
        .enumerate()
        .map(|(i, e)| (e.request_id, i))
        .collect();
    plan.slo_min = plan
        .selections
        .iter()
        .map(|s| queue[by_id[&s.request_id]].iteration_slo(stats))
        .min_by(f64::total_cmp);
    plan
}

/// Earliest time after `now` at which some entry becomes urgent, assuming
/// the statistics stay fixed.
pub fn next_urgent_time(
    cfg: &PolicyConfig,
    queue: &[QueueEntry],
    now: f64,
    stats: &ChunkStats,
) -> Option<f64> {
    let threshold = stats.t_max * (1.0 + cfg.urgency_slack);
    queue
        .iter()
        .map(|e| remaining_time(e, now, stats) - threshold)
        .filter(|&slack| slack > 0.0)
        .map(|slack| now + slack + 1e-9)
        .min_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the selection loop: every remaining
    /// candidate is scored on every round, no grouping.
    fn brute_force(
        a_gpu: usize,
        a_kv: usize,
        candidates: &[Candidate],
        pool: &BlockPool,
        limit: Option<usize>,
        active: usize,
    ) -> Vec<(RequestId, usize, usize)> {
        let b = pool.block_size();
        let (mut a_c, mut a_m, mut active) = (a_gpu as i128, a_kv as i128, active);
        let mut left: Vec<Candidate> = candidates.to_vec();
        let mut out = Vec::new();
        loop {
            let mut best: Option<(f64, usize, usize, i128, i128)> = None;
            for (k, c) in left.iter().enumerate() {
                if c.starts_long && limit.is_some_and(|l| active >= l) {
                    continue;
                }
                let (d_c, d_m) = if c.remaining_prompt == 0 {
                    let blocks = pool
                        .demand(c.request_id, Work::Decode)
                        .unwrap()
                        .blocks_needed;
                    (1i128, (blocks * b) as i128)
                } else {
                    // Largest chunk that fits both resources, by linear scan.
                    let mut len = 0;
                    for l in 1..=c.remaining_prompt.min(a_c.max(0) as usize) {
                        let d = pool.demand(c.request_id, c.work(l)).unwrap();
                        if (d.blocks_needed * b) as i128 <= a_m {
                            len = l;
                        }
                    }
                    if len == 0 {
                        continue;
                    }
                    let d = pool.demand(c.request_id, c.work(len)).unwrap();
                    (len as i128, (d.blocks_needed * b) as i128)
                };
                if d_c > a_c || d_m > a_m {
                    continue;
                }
                let dist = (((a_c - d_c).pow(2) + (a_m - d_m).pow(2)) as f64).sqrt();
                let better = match best {
                    None => true,
                    Some((bd, bp, ..)) => dist < bd || (dist == bd && c.position < bp),
                };
                if better {
                    best = Some((dist, c.position, k, d_c, d_m));
                }
            }
            let Some((_, _, k, d_c, d_m)) = best else {
                break;
            };
            let c = left.remove(k);
            if c.starts_long {
                active += 1;
            }
            a_c -= d_c;
            a_m -= d_m;
            out.push((c.request_id, d_c as usize, d_m as usize));
        }
        out
    }

    #[test]
    fn selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let b = [1, 4, 16][rng.random_range(0..3)];
            let mut pool = BlockPool::new(400, b);
            let n = rng.random_range(1..12);
            let mut cands = Vec::new();
            for id in 0..n as u64 {
                let kind = rng.random_range(0..3);
                let prompt_len = rng.random_range(1..120);
                // Resident decoders and mid-prompt entries get some cache.
                if kind > 0 {
                    let len = rng.random_range(1..40);
                    let w = Work::PromptChunk { len, first: true };
                    let d = pool.demand(id, w).unwrap();
                    if pool.allocate(id, w, d).is_err() {
                        continue;
                    }
                    if kind == 2 && rng.random_bool(0.3) {
                        pool.preempt(id).unwrap();
                    }
                }
                let starts_long = kind == 0 && rng.random_bool(0.4);
                cands.push(Candidate {
                    request_id: id,
                    position: cands.len(),
                    remaining_prompt: if kind == 1 { 0 } else { prompt_len },
                    first_chunk: kind == 0,
                    starts_long,
                });
            }
            let a_gpu = rng.random_range(0..200);
            let a_kv = (pool.free_blocks() * b).min(rng.random_range(0..2000));
            let limit = if rng.random_bool(0.5) { Some(1) } else { None };
            let active = rng.random_range(0..2);

            let mut era = EraGate::new(limit, active);
            let fast: Vec<_> = select_requests(a_gpu, a_kv, &cands, &pool, &mut era)
                .into_iter()
                .map(|p| (p.request_id, p.chunk_len, p.kv_tokens))
                .collect();
            let slow = brute_force(a_gpu, a_kv, &cands, &pool, limit, active);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn selection_prefers_full_use_of_both_resources() {
        let mut pool = BlockPool::new(10, 4);
        for id in 0..2 {
            let w = Work::PromptChunk {
                len: 4,
                first: true,
            };
            let d = pool.demand(id, w).unwrap();
            pool.allocate(id, w, d).unwrap();
        }
        // Two decoders need one block each; a prompt of 8 fits 2 blocks.
        let cands = vec![
            Candidate {
                request_id: 0,
                position: 0,
                remaining_prompt: 0,
                first_chunk: false,
                starts_long: false,
            },
            Candidate {
                request_id: 5,
                position: 1,
                remaining_prompt: 8,
                first_chunk: true,
                starts_long: false,
            },
        ];
        let mut era = EraGate::new(None, 0);
        let picks = select_requests(9, 12, &cands, &pool, &mut era);
        assert_eq!(picks[0].request_id, 5);
        assert_eq!((picks[0].chunk_len, picks[0].kv_tokens), (8, 8));
        assert_eq!(picks[1].request_id, 0);
    }

    #[test]
    fn era_gate_blocks_second_long_prompt() {
        let pool = BlockPool::new(1000, 16);
        let cands: Vec<Candidate> = (0..2)
            .map(|i| Candidate {
                request_id: i,
                position: i as usize,
                remaining_prompt: 50,
                first_chunk: true,
                starts_long: true,
            })
            .collect();
        let mut era = EraGate::new(Some(1), 0);
        let picks = select_requests(100, 16000, &cands, &pool, &mut era);
        assert_eq!(picks.len(), 1);
        assert_eq!(era.active(), 1);
        let mut era = EraGate::new(None, 0);
        assert_eq!(
            select_requests(100, 16000, &cands, &pool, &mut era).len(),
            2
        );
    }
}
