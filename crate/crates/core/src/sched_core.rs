//! Queue entries and remaining-time accounting shared by all policies.
//!
//! Every schedulable unit carries enough state to compute its remaining
//! time `T_r = SLO − T_w − T_e`: how long it may still wait before its
//! next iteration-level deadline becomes unreachable.

use serde::Serialize;

use crate::workload::{RequestId, RequestSpec, SloSpec};

pub const DEFAULT_URGENCY_SLACK: f64 = 0.1;

/// Smoothing factor of the running average chunk length.
pub const CHUNK_EMA_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    /// Prompt tokens remain to be processed.
    PromptPending,
    /// Prompt done; ready for the next generation step.
    TgReady,
    /// KV cache was swapped out; may be mid-prompt or mid-generation.
    Preempted,
}

/// Per-request JCT bookkeeping for offline requests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JctBudget {
    /// Initial allowed waiting time per iteration, `T̃_r`.
    pub allowance: f64,
    /// Accumulated over-use of waiting time (negative means credit).
    pub debt: f64,
    /// `N_ck + S_g` at admission.
    pub planned_iterations: usize,
    /// Waiting time actually spent, summed over cycles.
    pub waited: f64,
    /// Number of completed wait cycles.
    pub cycles: usize,
}

impl JctBudget {
    pub fn new(allowance: f64, planned_iterations: usize) -> Self {
        JctBudget {
            allowance,
            debt: 0.0,
            planned_iterations,
            waited: 0.0,
            cycles: 0,
        }
    }

    /// Allowance for the current cycle after debt propagation.
    pub fn effective_allowance(&self) -> f64 {
        self.allowance - self.debt
    }

    /// Carries over- or under-use of this cycle's waiting time into the
    /// following cycles.
    pub fn propagate_debt(&mut self, actual_wait: f64) {
        self.debt += actual_wait - self.allowance;
        self.waited += actual_wait;
        self.cycles += 1;
    }
}

/// A schedulable unit in the waiting queue.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueEntry {
    pub request_id: RequestId,
    pub phase: Phase,
    pub prompt_len: usize,
    /// Prompt tokens not yet processed, `S_r`.
    pub remaining_prompt: usize,
    /// Tokens in the context so far: prompt consumed plus generated.
    pub seq_len: usize,
    pub generated: usize,
    pub predicted_output_len: usize,
    pub arrival_time: f64,
    /// Reference time `t_0` for the waiting time `T_w = now − t_0`.
    pub enqueue_time: f64,
    /// Monotone enqueue counter; FIFO tie-breaker.
    pub enqueue_seq: u64,
    pub slo: SloSpec,
    pub jct: Option<JctBudget>,
    pub is_long: bool,
}

impl QueueEntry {
    pub fn new(spec: &RequestSpec, long_threshold: usize, enqueue_seq: u64) -> Self {
        QueueEntry {
            request_id: spec.id,
            phase: Phase::PromptPending,
            prompt_len: spec.prompt_len,
            remaining_prompt: spec.prompt_len,
            seq_len: 0,
            generated: 0,
            predicted_output_len: spec.predicted_output_len,
            arrival_time: spec.arrival_time,
            enqueue_time: spec.arrival_time,
            enqueue_seq,
            slo: spec.slo,
            jct: None,
            is_long: spec.is_long(long_threshold),
        }
    }

    pub fn is_prompt(&self) -> bool {
        self.remaining_prompt > 0
    }

    /// Some prompt tokens have been processed but not all.
    pub fn prefill_started(&self) -> bool {
        self.remaining_prompt > 0 && self.remaining_prompt < self.prompt_len
    }

    /// Long prompt whose prefill is under way (admitted chunks, unfinished).
    pub fn is_active_long_prefill(&self) -> bool {
        self.is_long && self.prefill_started()
    }

    /// The iteration-level SLO governing the entry's next deadline.
    pub fn iteration_slo(&self, stats: &ChunkStats) -> f64 {
        match (&self.slo, &self.jct) {
            (SloSpec::Online { ttft, .. }, _) if self.is_prompt() => *ttft,
            (SloSpec::Online { tbt, .. }, _) => *tbt,
            (SloSpec::Offline { .. }, Some(b)) => b.effective_allowance().max(0.0) + stats.t_max,
            (SloSpec::Offline { jct }, None) => *jct,
        }
    }
}

/// Running statistics feeding the remaining-time estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkStats {
    /// Average prompt chunk length `L_c` (tokens).
    pub avg_chunk_len: f64,
    /// Maximum batch execution time `T_max` (seconds).
    pub t_max: f64,
    /// Probability that a generation step is followed by a preemption.
    pub preempt_prob: f64,
    /// Longest observed preemption (seconds).
    pub preempt_max: f64,
    decode_steps: u64,
    preemptions: u64,
}

impl ChunkStats {
    pub fn new(initial_chunk_len: usize, t_max: f64) -> Self {
        ChunkStats {
            avg_chunk_len: initial_chunk_len.max(1) as f64,
            t_max,
            preempt_prob: 0.0,
            preempt_max: 0.0,
            decode_steps: 0,
            preemptions: 0,
        }
    }

    pub fn record_chunk(&mut self, len: usize) {
        self.avg_chunk_len =
            (1.0 - CHUNK_EMA_ALPHA) * self.avg_chunk_len + CHUNK_EMA_ALPHA * len as f64;
        self.avg_chunk_len = self.avg_chunk_len.max(1.0);
    }

    pub fn record_decode_step(&mut self) {
        self.decode_steps += 1;
        self.refresh_prob();
    }

    pub fn record_preemption(&mut self) {
        self.preemptions += 1;
        self.refresh_prob();
    }

    pub fn record_preemption_duration(&mut self, secs: f64) {
        self.preempt_max = self.preempt_max.max(secs);
    }

    fn refresh_prob(&mut self) {
        self.preempt_prob = if self.decode_steps == 0 {
            0.0
        } else {
            (self.preemptions as f64 / self.decode_steps as f64).min(1.0)
        };
    }
}

/// `N_ck ≈ ⌈S_r / L_c⌉`, and 1 for a generation step.
pub fn remaining_chunks(remaining_prompt: usize, stats: &ChunkStats) -> usize {
    if remaining_prompt == 0 {
        1
    } else {
        (remaining_prompt as f64 / stats.avg_chunk_len)
            .ceil()
            .max(1.0) as usize
    }
}

/// `T_r = SLO − T_w − T_e` for online entries; for offline entries the
/// current effective allowance minus the wait of this cycle.
pub fn remaining_time(entry: &QueueEntry, now: f64, stats: &ChunkStats) -> f64 {
    let waited = now - entry.enqueue_time;
    match (&entry.slo, &entry.jct) {
        (SloSpec::Offline { .. }, Some(budget)) => budget.effective_allowance() - waited,
        _ => {
            let exec = remaining_chunks(entry.remaining_prompt, stats) as f64 * stats.t_max;
            entry.iteration_slo(stats) - waited - exec
        }
    }
}

/// Whole-job execution estimate for an offline request:
/// `N_ck·T_max + S_g·(T_max + P_max·P)`.
pub fn jct_initial_estimate(spec: &RequestSpec, stats: &ChunkStats) -> f64 {
    let chunks = remaining_chunks(spec.prompt_len, stats) as f64;
    let per_token = stats.t_max + stats.preempt_max * stats.preempt_prob;
    chunks * stats.t_max + spec.predicted_output_len as f64 * per_token
}

/// Allowed waiting time per iteration, `(SLO_JCT − T_e)/(N_ck + S_g)`.
/// Negative when the target is already infeasible.
pub fn jct_allowance(spec: &RequestSpec, estimate: f64, stats: &ChunkStats) -> f64 {
    let SloSpec::Offline { jct } = spec.slo else {
        return 0.0;
    };
    (jct - estimate) / planned_iterations(spec, stats) as f64
}

pub fn planned_iterations(spec: &RequestSpec, stats: &ChunkStats) -> usize {
    remaining_chunks(spec.prompt_len, stats) + spec.predicted_output_len
}

/// JCT budget assigned to an offline request when it first enters the queue.
pub fn admit_offline(spec: &RequestSpec, stats: &ChunkStats) -> Option<JctBudget> {
    if !spec.slo.is_offline() {
        return None;
    }
    let estimate = jct_initial_estimate(spec, stats);
    Some(JctBudget::new(
        jct_allowance(spec, estimate, stats),
        planned_iterations(spec, stats),
    ))
}

/// Sorts the queue by ascending remaining time, ties by enqueue order, and
/// returns the remaining times in the new order.
pub fn order_queue(queue: &mut Vec<QueueEntry>, now: f64, stats: &ChunkStats) -> Vec<f64> {
    let mut keyed: Vec<(f64, QueueEntry)> = queue
        .drain(..)
        .map(|e| (remaining_time(&e, now, stats), e))
        .collect();
    keyed.sort_by(|(ta, a), (tb, b)| {
        ta.total_cmp(tb)
            .then_with(|| a.enqueue_seq.cmp(&b.enqueue_seq))
    });
    let mut times = Vec::with_capacity(keyed.len());
    for (t, e) in keyed {
        times.push(t);
        queue.push(e);
    }
    times
}

/// An entry is urgent when it must run in the next iteration to keep its
/// deadline: `T_r ≤ T_max·(1 + slack)`.
pub fn is_urgent(remaining: f64, stats: &ChunkStats, slack: f64) -> bool {
    remaining <= stats.t_max * (1.0 + slack)
}
