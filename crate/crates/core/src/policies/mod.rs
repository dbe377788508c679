//! Batching policies. Each planner turns a snapshot of the waiting queue
//! and the KV-cache pool into a [`BatchPlan`] for the next iteration.

mod accelgen;
mod baselines;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cost_model::ModelProfile;
use crate::kvc::{BlockPool, KvcDemand, Work};
use crate::sched_core::{ChunkStats, QueueEntry, DEFAULT_URGENCY_SLACK};
use crate::workload::RequestId;

pub use accelgen::{accelgen_plan, next_urgent_time, select_requests, Candidate, EraGate, Pick};
pub use baselines::{orca_plan, paged_fcfs_plan, static_chunk_plan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Whole prompts, FCFS, max-length KV reservations, fixed batch size.
    OrcaFcfs,
    /// Whole prompts, FCFS, paged KV blocks.
    PagedFcfs,
    /// Fixed-size prompt chunks piggybacked on decodes, FCFS.
    StaticChunk,
    /// SLO-driven budget, dynamic chunking, remaining-time ordering and
    /// multi-resource selection.
    #[serde(rename = "accelgen")]
    AccelGen,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::OrcaFcfs,
        PolicyKind::PagedFcfs,
        PolicyKind::StaticChunk,
        PolicyKind::AccelGen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::OrcaFcfs => "orca_fcfs",
            PolicyKind::PagedFcfs => "paged_fcfs",
            PolicyKind::StaticChunk => "static_chunk",
            PolicyKind::AccelGen => "accelgen",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

/// Upper bound on the token budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetCap {
    /// The profile's pivot forward size.
    #[default]
    Pivot,
    Tokens(usize),
    /// No cap; the SLO-derived budget is used as is.
    Disabled,
}

impl BudgetCap {
    pub fn resolve(&self, profile: &ModelProfile) -> Option<usize> {
        match *self {
            BudgetCap::Pivot => Some(profile.pivot_forward_size),
            BudgetCap::Tokens(n) => Some(n.max(1)),
            BudgetCap::Disabled => None,
        }
    }
}

impl Serialize for BudgetCap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BudgetCap::Pivot => s.serialize_str("pivot"),
            BudgetCap::Tokens(n) => s.serialize_u64(*n as u64),
            BudgetCap::Disabled => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for BudgetCap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tokens(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Tokens(0) => Err(serde::de::Error::custom("budget cap must be >= 1")),
            Raw::Tokens(n) => Ok(BudgetCap::Tokens(n as usize)),
            Raw::Word(w) => match w.as_str() {
                "pivot" => Ok(BudgetCap::Pivot),
                "none" | "disabled" => Ok(BudgetCap::Disabled),
                other => Err(serde::de::Error::custom(format!(
                    "budget cap must be an integer, \"pivot\" or \"none\", got `{other}`"
                ))),
            },
        }
    }
}

/// When a long prompt stops counting against the exclusive-allocation limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EraScope {
    /// Once its last prompt chunk has been processed.
    #[default]
    Prefill,
    /// Once the whole request has completed.
    FullJob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    /// Name used in reports; defaults to the policy name.
    pub label: Option<String>,
    pub static_chunk_len: usize,
    /// Candidate window width `γ` in seconds.
    #[serde(rename = "gamma_s")]
    pub gamma: f64,
    /// `None` disables exclusive long-prompt allocation.
    pub max_concurrent_long: Option<usize>,
    pub era_scope: EraScope,
    #[serde(rename = "budget_cap_tokens")]
    pub budget_cap: BudgetCap,
    pub orca_batch_size: usize,
    pub orca_max_seq: usize,
    pub urgency_slack: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: PolicyKind::AccelGen,
            label: None,
            static_chunk_len: 512,
            gamma: 0.75,
            max_concurrent_long: Some(1),
            era_scope: EraScope::Prefill,
            budget_cap: BudgetCap::Pivot,
            orca_batch_size: 8,
            orca_max_seq: 8192,
            urgency_slack: DEFAULT_URGENCY_SLACK,
        }
    }
}

impl PolicyConfig {
    pub fn new(policy: PolicyKind) -> Self {
        PolicyConfig {
            policy,
            ..PolicyConfig::default()
        }
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.policy.name().to_string())
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation("gamma_s", "must be >= 0"));
        }
        if self.static_chunk_len < 1 {
            return Err(Error::validation("static_chunk_len", "must be >= 1"));
        }
        if self.orca_batch_size < 1 || self.orca_max_seq < 1 {
            return Err(Error::validation(
                "orca_batch_size",
                "batch size and max sequence length must be >= 1",
            ));
        }
        if self.max_concurrent_long == Some(0) {
            return Err(Error::validation("max_concurrent_long", "must be >= 1"));
        }
        if !(self.urgency_slack >= 0.0 && self.urgency_slack.is_finite()) {
            return Err(Error::validation("urgency_slack", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub request_id: RequestId,
    /// Input tokens this entry contributes; 1 for a generation step.
    pub chunk_len: usize,
    /// Last prompt chunk, or a generation step: produces an output token.
    pub is_final_chunk: bool,
    pub is_prompt: bool,
}

impl Selection {
    pub fn work(&self, first_chunk: bool) -> Work {
        if self.is_prompt {
            Work::PromptChunk {
                len: self.chunk_len,
                first: first_chunk,
            }
        } else {
            Work::Decode
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PreemptReason {
    /// Not enough GPU budget or KV cache for the entry.
    Capacity,
    /// Held back because another long prompt owns the prefill slot.
    Era,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preemption {
    pub request_id: RequestId,
    pub reason: PreemptReason,
    /// Whether the entry's KV cache must be swapped out.
    pub swap_out: bool,
}

/// Planner-side observations kept for trajectory checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PlanDiagnostics {
    /// Remaining times along the queue after ordering (remaining-time
    /// ordered policies only).
    pub queue_remaining: Vec<f64>,
    pub urgent: Vec<RequestId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchPlan {
    pub selections: Vec<Selection>,
    pub forward_size: usize,
    pub token_budget: usize,
    /// Applied before any allocation of this plan.
    pub preempted: Vec<Preemption>,
    pub slo_min: Option<f64>,
    /// KV space reserved by a max-length reservation scheme, in tokens.
    pub reserved_kvc_tokens: Option<usize>,
    pub diagnostics: PlanDiagnostics,
}

impl BatchPlan {
    pub fn empty(token_budget: usize) -> Self {
        BatchPlan {
            selections: Vec::new(),
            forward_size: 0,
            token_budget,
            preempted: Vec::new(),
            slo_min: None,
            reserved_kvc_tokens: None,
            diagnostics: PlanDiagnostics::default(),
        }
    }

    pub(crate) fn push(&mut self, sel: Selection) {
        self.forward_size += sel.chunk_len;
        self.selections.push(sel);
    }

    pub fn is_idle(&self) -> bool {
        self.selections.is_empty()
    }

    /// Structural invariants that hold for every plan regardless of pool
    /// state.
    pub fn check_invariants(&self) -> Result<(), String> {
        let total: usize = self.selections.iter().map(|s| s.chunk_len).sum();
        if total != self.forward_size {
            return Err(format!(
                "forward size {} != Σ chunk lengths {total}",
                self.forward_size
            ));
        }
        if self.forward_size > self.token_budget {
            return Err(format!(
                "forward size {} exceeds budget {}",
                self.forward_size, self.token_budget
            ));
        }
        let mut seen = HashSet::new();
        for s in &self.selections {
            if s.chunk_len < 1 {
                return Err(format!("empty chunk for request {}", s.request_id));
            }
            if !s.is_prompt && (s.chunk_len != 1 || !s.is_final_chunk) {
                return Err(format!("malformed decode step for {}", s.request_id));
            }
            if !seen.insert(s.request_id) {
                return Err(format!("request {} selected twice", s.request_id));
            }
        }
        if let Some(p) = self.preempted.iter().find(|p| seen.contains(&p.request_id)) {
            return Err(format!(
                "request {} both selected and preempted",
                p.request_id
            ));
        }
        Ok(())
    }
}

/// What a planner sees.
pub struct PlanContext<'a> {
    pub now: f64,
    /// Every live request not currently executing. Planners may reorder it.
    pub queue: &'a mut Vec<QueueEntry>,
    pub pool: &'a BlockPool,
    pub stats: &'a ChunkStats,
    pub profile: &'a ModelProfile,
}

/// Plans the next iteration with the configured policy.
pub fn plan(cfg: &PolicyConfig, ctx: &mut PlanContext<'_>) -> BatchPlan {
    match cfg.policy {
        PolicyKind::AccelGen => accelgen_plan(cfg, ctx),
        PolicyKind::PagedFcfs => paged_fcfs_plan(cfg, ctx),
        PolicyKind::StaticChunk => static_chunk_plan(cfg, ctx),
        PolicyKind::OrcaFcfs => orca_plan(cfg, ctx),
    }
}

/// Time at which the policy may want to act even without new arrivals.
pub fn wakeup_time(
    cfg: &PolicyConfig,
    queue: &[QueueEntry],
    now: f64,
    stats: &ChunkStats,
) -> Option<f64> {
    match cfg.policy {
        PolicyKind::AccelGen => next_urgent_time(cfg, queue, now, stats),
        _ => None,
    }
}

/// `S_b = S_pf·SLO_min / T_pf`, floored, capped, and at least one token.
pub fn token_budget(slo_min: f64, profile: &ModelProfile, cap: Option<usize>) -> usize {
    let raw = profile.pivot_forward_size as f64 * slo_min / profile.pivot_time;
    // Snap values within float noise of an integer before flooring, so
    // decimal inputs like 0.04/0.08 land on the exact quotient.
    let nearest = raw.round();
    let floored = if (raw - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        raw.floor()
    };
    let budget = if floored.is_nan() || floored < 1.0 {
        1
    } else if floored >= usize::MAX as f64 {
        usize::MAX
    } else {
        floored as usize
    };
    cap.map_or(budget, |c| budget.min(c)).max(1)
}

/// Dynamic chunking: take as many of the remaining prompt tokens as fit.
pub fn dynamic_chunk(prompt_remainder: usize, room: usize) -> usize {
    prompt_remainder.min(room)
}

/// Only the last chunk of a prompt, or a generation step, yields a token.
pub fn emit_token_on_final_chunk(selection: &Selection) -> bool {
    !selection.is_prompt || selection.is_final_chunk
}

/// KV-cache work for an entry: a decode step, or a prompt chunk that is
/// "first" when the request holds no cached context.
pub(crate) fn work_for(pool: &BlockPool, entry: &QueueEntry, chunk_len: usize) -> Work {
    if entry.is_prompt() {
        let id = entry.request_id;
        Work::PromptChunk {
            len: chunk_len,
            first: !pool.is_resident(id) && pool.swapped_tokens(id).is_none(),
        }
    } else {
        Work::Decode
    }
}

pub(crate) fn demand_for(pool: &BlockPool, entry: &QueueEntry, chunk_len: usize) -> KvcDemand {
    pool.demand(entry.request_id, work_for(pool, entry, chunk_len))
        .expect("queue entries always have a consistent KV state")
}
