//! Discrete-event simulator for LLM inference serving with SLO-aware
//! batching policies.
//!
//! The pipeline is: [`workload`] produces request traces, [`engine`] drives
//! iterations using a policy from [`policies`], costs come from
//! [`cost_model`], KV-cache accounting from [`kvc`], and [`metrics`] turns
//! the records into a report.

pub mod config;
pub mod cost_model;
pub mod engine;
pub mod error;
pub mod kvc;
pub mod metrics;
pub mod policies;
pub mod sched_core;
pub mod workload;

pub use config::{GpuSpec, ProfileSpec, RunConfig, TraceSource};
pub use cost_model::{GpuProfile, ModelProfile};
pub use engine::{simulate, EngineConfig, SimulationResult, Simulator, StepEvent};
pub use error::{Error, Result};
pub use kvc::BlockPool;
pub use metrics::MetricsReport;
pub use policies::{BatchPlan, PolicyConfig, PolicyKind};
pub use workload::{RequestSpec, SloSpec, TraceConfig};
