//! Discrete-event simulation loop.
//!
//! Every live request sits in one waiting queue between iterations. Each
//! step asks the policy for a plan, checks it, applies preemptions and KV
//! allocations, advances the clock by the modelled iteration time and
//! updates per-request state.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost_model::{iteration_time, ModelProfile};
use crate::error::{Error, Result};
use crate::kvc::{BlockPool, DEFAULT_BLOCK_SIZE};
use crate::metrics::{compute_metrics, IterationRecord, MetricsReport, RequestOutcome, RunSummary};
use crate::policies::{self, BatchPlan, PlanContext, PolicyConfig};
use crate::sched_core::{admit_offline, ChunkStats, Phase, QueueEntry};
use crate::workload::DEFAULT_LONG_PROMPT_THRESHOLD;
use crate::workload::{write_trace_to, RequestId, RequestSpec, SloSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub block_size: usize,
    pub kvc_capacity_tokens: usize,
    /// Seconds charged per token swapped out or back in.
    pub swap_cost_per_token_s: f64,
    /// Seconds added to every iteration.
    pub sched_overhead_s: f64,
    /// Simulated time after which the run stops and is marked truncated.
    pub horizon_s: Option<f64>,
    pub long_prompt_threshold: usize,
    /// Window length for windowed goodput.
    pub goodput_window_s: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            block_size: DEFAULT_BLOCK_SIZE,
            kvc_capacity_tokens: 131_072,
            swap_cost_per_token_s: 0.0,
            sched_overhead_s: 0.0,
            horizon_s: None,
            long_prompt_threshold: DEFAULT_LONG_PROMPT_THRESHOLD,
            goodput_window_s: 1.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 1 {
            return Err(Error::validation("block_size", "must be >= 1"));
        }
        if self.kvc_capacity_tokens < self.block_size {
            return Err(Error::validation(
                "kvc_capacity_tokens",
                "must hold at least one block",
            ));
        }
        for (field, v) in [
            ("swap_cost_per_token_s", self.swap_cost_per_token_s),
            ("sched_overhead_s", self.sched_overhead_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(field, "must be >= 0"));
            }
        }
        if self.horizon_s.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::validation("horizon_s", "must be > 0"));
        }
        if !(self.goodput_window_s > 0.0 && self.goodput_window_s.is_finite()) {
            return Err(Error::validation("goodput_window_s", "must be > 0"));
        }
        Ok(())
    }
}

/// What one call to [`Simulator::step`] did.
#[derive(Debug, Clone)]
pub enum StepEvent {
    /// An iteration ran.
    Iteration {
        index: u64,
        record: IterationRecord,
        plan: BatchPlan,
    },
    /// Nothing was runnable; the clock jumped.
    Idle { from: f64, to: f64 },
    /// Only preemptions were applied; the clock did not move.
    Reshuffle { plan: BatchPlan },
    /// All requests have finished, or the horizon was reached.
    Finished,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub report: MetricsReport,
    pub requests: Vec<RequestOutcome>,
    pub iterations: Vec<IterationRecord>,
}

/// SHA-256 over the canonical JSONL form of a trace.
pub fn trace_digest(trace: &[RequestSpec]) -> String {
    let mut buf = Vec::new();
    write_trace_to(&mut buf, trace).expect("writing to memory cannot fail");
    Sha256::digest(&buf)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct Simulator {
    policy: PolicyConfig,
    profile: ModelProfile,
    engine: EngineConfig,
    digest: String,
    now: f64,
    pool: BlockPool,
    stats: ChunkStats,
    queue: Vec<QueueEntry>,
    outcomes: Vec<RequestOutcome>,
    index_of: HashMap<RequestId, usize>,
    /// Position of the next request yet to arrive, in arrival order.
    next_arrival: usize,
    arrival_order: Vec<usize>,
    next_seq: u64,
    iterations: Vec<IterationRecord>,
    swapped_at: HashMap<RequestId, f64>,
    consecutive_reshuffles: usize,
    truncated: bool,
}

impl Simulator {
    pub fn new(
        trace: &[RequestSpec],
        policy: PolicyConfig,
        profile: ModelProfile,
        engine: EngineConfig,
    ) -> Result<Self> {
        policy.validate()?;
        profile.validate()?;
        engine.validate()?;
        let mut index_of = HashMap::with_capacity(trace.len());
        for (i, spec) in trace.iter().enumerate() {
            spec.validate()?;
            if index_of.insert(spec.id, i).is_some() {
                return Err(Error::Config(format!("duplicate request id {}", spec.id)));
            }
        }
        let mut arrival_order: Vec<usize> = (0..trace.len()).collect();
        arrival_order.sort_by(|&a, &b| {
            trace[a]
                .arrival_time
                .total_cmp(&trace[b].arrival_time)
                .then(trace[a].id.cmp(&trace[b].id))
        });
        let stats = ChunkStats::new(profile.pivot_forward_size, profile.max_batch_time());
        Ok(Simulator {
            digest: trace_digest(trace),
            pool: BlockPool::from_capacity_tokens(engine.kvc_capacity_tokens, engine.block_size),
            policy,
            profile,
            engine,
            now: 0.0,
            stats,
            queue: Vec::new(),
            outcomes: trace.iter().cloned().map(RequestOutcome::new).collect(),
            index_of,
            next_arrival: 0,
            arrival_order,
            next_seq: 0,
            iterations: Vec::new(),
            swapped_at: HashMap::new(),
            consecutive_reshuffles: 0,
            truncated: false,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn queue(&self) -> &[QueueEntry] {
        &self.queue
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn stats(&self) -> &ChunkStats {
        &self.stats
    }

    pub fn outcomes(&self) -> &[RequestOutcome] {
        &self.outcomes
    }

    fn outcome_mut(&mut self, id: RequestId) -> &mut RequestOutcome {
        let i = self.index_of[&id];
        &mut self.outcomes[i]
    }

    fn next_arrival_time(&self) -> Option<f64> {
        self.arrival_order
            .get(self.next_arrival)
            .map(|&i| self.outcomes[i].spec.arrival_time)
    }

    fn admit_arrivals(&mut self) {
        while let Some(&i) = self.arrival_order.get(self.next_arrival) {
            let spec = &self.outcomes[i].spec;
            if spec.arrival_time > self.now {
                break;
            }
            self.next_arrival += 1;
            let total = spec.prompt_len + spec.output_len;
            if self.pool.blocks_for(total) > self.pool.total_blocks() {
                log::warn!(
                    "request {} needs {total} KV tokens, more than the cache holds; rejected",
                    spec.id
                );
                self.outcomes[i].rejected = true;
                continue;
            }
            let mut entry = QueueEntry::new(spec, self.engine.long_prompt_threshold, self.next_seq);
            self.next_seq += 1;
            entry.jct = admit_offline(spec, &self.stats);
            self.queue.push(entry);
        }
    }

    fn is_done(&self) -> bool {
        self.queue.is_empty() && self.next_arrival >= self.arrival_order.len()
    }

    /// Advances the simulation by one event.
    pub fn step(&mut self) -> Result<StepEvent> {
        self.admit_arrivals();
        if self.is_done() {
            return Ok(StepEvent::Finished);
        }
        if self.engine.horizon_s.is_some_and(|h| self.now >= h) {
            self.truncated = true;
            return Ok(StepEvent::Finished);
        }
        if self.queue.is_empty() {
            let from = self.now;
            self.now = self.next_arrival_time().expect("not done implies arrivals");
            return Ok(StepEvent::Idle { from, to: self.now });
        }

        let plan = {
            let mut ctx = PlanContext {
                now: self.now,
                queue: &mut self.queue,
                pool: &self.pool,
                stats: &self.stats,
                profile: &self.profile,
            };
            policies::plan(&self.policy, &mut ctx)
        };
        self.check_plan(&plan)?;
        let swap_tokens = self.apply_preemptions(&plan)?;

        if plan.selections.is_empty() {
            if swap_tokens > 0 || plan.preempted.iter().any(|p| p.swap_out) {
                self.consecutive_reshuffles += 1;
                if self.consecutive_reshuffles > self.queue.len() + 1 {
                    return Err(Error::InvariantViolation(format!(
                        "policy keeps preempting without running anything at t={}",
                        self.now
                    )));
                }
                self.now += swap_tokens as f64 * self.engine.swap_cost_per_token_s;
                return Ok(StepEvent::Reshuffle { plan });
            }
            let wake = policies::wakeup_time(&self.policy, &self.queue, self.now, &self.stats);
            let next = [self.next_arrival_time(), wake]
                .into_iter()
                .flatten()
                .filter(|&t| t > self.now)
                .min_by(f64::total_cmp);
            let Some(next) = next else {
                return Err(Error::InvariantViolation(format!(
                    "no runnable request and nothing to wait for at t={} ({} queued, {} free blocks)",
                    self.now,
                    self.queue.len(),
                    self.pool.free_blocks()
                )));
            };
            let from = self.now;
            self.now = next;
            return Ok(StepEvent::Idle { from, to: next });
        }
        self.consecutive_reshuffles = 0;
        self.execute(plan, swap_tokens)
    }

    fn check_plan(&self, plan: &BatchPlan) -> Result<()> {
        plan.check_invariants().map_err(Error::InvariantViolation)?;
        let waiting: HashSet<RequestId> = self.queue.iter().map(|e| e.request_id).collect();
        for s in &plan.selections {
            if !waiting.contains(&s.request_id) {
                return Err(Error::InvariantViolation(format!(
                    "selected request {} is not waiting",
                    s.request_id
                )));
            }
        }
        Ok(())
    }

    fn apply_preemptions(&mut self, plan: &BatchPlan) -> Result<usize> {
        let mut swapped = 0;
        if !plan.preempted.iter().any(|p| p.swap_out) {
            return Ok(0);
        }
        let pos: HashMap<RequestId, usize> = self
            .queue
            .iter()
            .enumerate()
            .map(|(i, e)| (e.request_id, i))
            .collect();
        for p in plan.preempted.iter().filter(|p| p.swap_out) {
            let tokens = self
                .pool
                .preempt(p.request_id)
                .map_err(|e| Error::InvariantViolation(format!("bad preemption: {e}")))?;
            swapped += tokens;
            if let Some(&i) = pos.get(&p.request_id) {
                self.queue[i].phase = Phase::Preempted;
            }
            self.swapped_at.insert(p.request_id, self.now);
            self.stats.record_preemption();
            self.outcome_mut(p.request_id).preemptions += 1;
        }
        Ok(swapped)
    }

    fn execute(&mut self, plan: BatchPlan, swap_tokens: usize) -> Result<StepEvent> {
        let index = self.iterations.len() as u64;
        let start = self.now;
        let pos: HashMap<RequestId, usize> = self
            .queue
            .iter()
            .enumerate()
            .map(|(i, e)| (e.request_id, i))
            .collect();

        let mut swap_tokens = swap_tokens;
        for s in &plan.selections {
            let id = s.request_id;
            swap_tokens += self.pool.swapped_tokens(id).unwrap_or(0);
            let first = !self.pool.is_resident(id) && self.pool.swapped_tokens(id).is_none();
            let work = s.work(first);
            let demand = self.pool.demand(id, work)?;
            self.pool.allocate(id, work, demand).map_err(|e| {
                Error::InvariantViolation(format!("plan exceeds KV cache for {id}: {e}"))
            })?;
            if let Some(t) = self.swapped_at.remove(&id) {
                self.stats.record_preemption_duration(start - t);
            }
            let entry = &mut self.queue[pos[&id]];
            if let Some(budget) = entry.jct.as_mut() {
                budget.propagate_debt(start - entry.enqueue_time);
            }
            let out = self.outcome_mut(id);
            out.first_scheduled.get_or_insert(start);
            out.admitted_iteration.get_or_insert(index);
        }

        let kvc_tokens = plan
            .reserved_kvc_tokens
            .unwrap_or_else(|| self.pool.allocated_tokens());
        let duration = iteration_time(plan.forward_size, &self.profile)
            + swap_tokens as f64 * self.engine.swap_cost_per_token_s
            + self.engine.sched_overhead_s;
        self.now += duration;
        let now = self.now;

        let mut finished = Vec::new();
        for s in &plan.selections {
            let id = s.request_id;
            let i = pos[&id];
            let entry = &mut self.queue[i];
            if s.is_prompt {
                entry.remaining_prompt -= s.chunk_len;
                entry.seq_len += s.chunk_len;
                self.stats.record_chunk(s.chunk_len);
            } else {
                entry.seq_len += 1;
                self.stats.record_decode_step();
            }
            let emits = policies::emit_token_on_final_chunk(s);
            if emits {
                entry.generated += 1;
            }
            let generated = entry.generated;
            let remaining = entry.remaining_prompt;
            let is_offline = entry.slo.is_offline();
            let budget = entry.jct.clone();
            let output_len = self.outcomes[self.index_of[&id]].spec.output_len;
            let done = generated >= output_len;
            {
                let entry = &mut self.queue[i];
                entry.phase = if remaining > 0 {
                    Phase::PromptPending
                } else {
                    Phase::TgReady
                };
                entry.enqueue_time = match entry.slo {
                    SloSpec::Online { .. } if remaining > 0 => entry.arrival_time,
                    _ => now,
                };
                entry.enqueue_seq = self.next_seq;
            }
            self.next_seq += 1;
            let out = self.outcome_mut(id);
            if s.is_prompt {
                out.chunks.push(s.chunk_len);
            }
            if emits {
                out.emissions.push(now);
            }
            if is_offline {
                out.jct_budget = budget;
            }
            if done {
                out.finished_at = Some(now);
                finished.push(id);
            }
        }
        if !finished.is_empty() {
            for &id in &finished {
                self.pool.release(id)?;
            }
            let done: HashSet<RequestId> = finished.into_iter().collect();
            self.queue.retain(|e| !done.contains(&e.request_id));
        }
        debug_assert!(self.pool.check_invariants().is_ok());

        let record = IterationRecord {
            start,
            duration,
            forward_size: plan.forward_size,
            token_budget: plan.token_budget,
            kvc_tokens,
            selected: plan.selections.len(),
            preempted: plan.preempted.iter().filter(|p| p.swap_out).count(),
        };
        self.iterations.push(record.clone());
        Ok(StepEvent::Iteration {
            index,
            record,
            plan,
        })
    }

    /// Runs to completion (or the horizon) and computes the report.
    pub fn run(mut self) -> Result<SimulationResult> {
        loop {
            if let StepEvent::Finished = self.step()? {
                break;
            }
        }
        self.pool
            .check_invariants()
            .map_err(Error::InvariantViolation)?;
        Ok(self.finish())
    }

    /// Computes the report from the state reached so far.
    pub fn finish(self) -> SimulationResult {
        let end = self
            .iterations
            .last()
            .map_or(0.0, |it| it.start + it.duration);
        let report = compute_metrics(&RunSummary {
            policy: self.policy.label(),
            trace_digest: self.digest.clone(),
            requests: &self.outcomes,
            iterations: &self.iterations,
            end_time: end,
            pivot_forward_size: self.profile.pivot_forward_size,
            kvc_capacity_tokens: self.pool.capacity_tokens(),
            window: self.engine.goodput_window_s,
            truncated: self.truncated,
        });
        SimulationResult {
            report,
            requests: self.outcomes,
            iterations: self.iterations,
        }
    }
}

/// Convenience wrapper around [`Simulator::new`] and [`Simulator::run`].
pub fn simulate(
    trace: &[RequestSpec],
    policy: &PolicyConfig,
    profile: &ModelProfile,
    engine: &EngineConfig,
) -> Result<SimulationResult> {
    Simulator::new(trace, policy.clone(), profile.clone(), engine.clone())?.run()
}
