//! Request traces: synthetic mixed-prompt generation and JSONL ingestion.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cost_model::{prefill_latency, ModelProfile};
use crate::error::{Error, Result};

pub type RequestId = u64;

/// Default reading-speed TBT target, seconds per token.
pub const BASE_TBT_SLO: f64 = 0.1875;

/// Prompts at or above this length are "long".
pub const DEFAULT_LONG_PROMPT_THRESHOLD: usize = 4096;

/// Width of the prompt-length buckets used to derive TTFT targets.
pub const TTFT_BUCKET_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SloSpec {
    /// Latency-sensitive: time to first token and per-token gap.
    Online { ttft: f64, tbt: f64 },
    /// Throughput-oriented: whole-job completion deadline.
    Offline { jct: f64 },
}

impl SloSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        match *self {
            SloSpec::Online { ttft, tbt } => {
                if !positive(ttft) {
                    return Err(Error::validation("slo.ttft", format!("{ttft} is not > 0")));
                }
                if !positive(tbt) {
                    return Err(Error::validation("slo.tbt", format!("{tbt} is not > 0")));
                }
            }
            SloSpec::Offline { jct } => {
                if !positive(jct) {
                    return Err(Error::validation("slo.jct", format!("{jct} is not > 0")));
                }
            }
        }
        Ok(())
    }

    pub fn is_offline(&self) -> bool {
        matches!(self, SloSpec::Offline { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: RequestId,
    pub arrival_time: f64,
    pub prompt_len: usize,
    /// Ground-truth generation length; only the engine looks at it.
    pub output_len: usize,
    /// Generation length visible to schedulers.
    pub predicted_output_len: usize,
    pub slo: SloSpec,
}

impl RequestSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_time >= 0.0 && self.arrival_time.is_finite()) {
            return Err(Error::validation(
                "arrival",
                format!("{} is not a finite time >= 0", self.arrival_time),
            ));
        }
        if self.prompt_len < 1 {
            return Err(Error::validation("prompt", "prompt length must be >= 1"));
        }
        if self.output_len < 1 {
            return Err(Error::validation("output", "output length must be >= 1"));
        }
        if self.predicted_output_len < 1 {
            return Err(Error::validation(
                "predicted_output",
                "predicted output length must be >= 1",
            ));
        }
        self.slo.validate()
    }

    pub fn is_long(&self, threshold: usize) -> bool {
        self.prompt_len >= threshold
    }
}

/// Discrete token-length distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Constant { value: usize },
    Uniform { min: usize, max: usize },
    LogUniform { min: usize, max: usize },
    Choice { values: Vec<usize> },
    Mixture { components: Vec<(f64, LengthDist)> },
}

impl LengthDist {
    pub fn validate(&self, name: &'static str) -> Result<()> {
        match self {
            LengthDist::Constant { value } if *value < 1 => Err(Error::Config(format!(
                "{name}: constant length must be >= 1"
            ))),
            LengthDist::Uniform { min, max } | LengthDist::LogUniform { min, max }
                if *min < 1 || min > max =>
            {
                Err(Error::Config(format!(
                    "{name}: empty length range [{min}, {max}]"
                )))
            }
            LengthDist::Choice { values } if values.is_empty() || values.contains(&0) => Err(
                Error::Config(format!("{name}: empty distribution or zero length")),
            ),
            LengthDist::Mixture { components } => {
                if components.is_empty() || components.iter().all(|(w, _)| *w <= 0.0) {
                    return Err(Error::Config(format!("{name}: empty mixture")));
                }
                if components
                    .iter()
                    .any(|(w, _)| !(*w >= 0.0 && w.is_finite()))
                {
                    return Err(Error::Config(format!("{name}: negative mixture weight")));
                }
                components.iter().try_for_each(|(_, d)| d.validate(name))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            LengthDist::Constant { value } => *value,
            LengthDist::Uniform { min, max } => rng.random_range(*min..=*max),
            LengthDist::LogUniform { min, max } => {
                let (lo, hi) = ((*min as f64).ln(), (*max as f64 + 1.0).ln());
                let v = rng.random_range(lo..hi).exp().floor() as usize;
                v.clamp(*min, *max)
            }
            LengthDist::Choice { values } => values[rng.random_range(0..values.len())],
            LengthDist::Mixture { components } => {
                let total: f64 = components.iter().map(|(w, _)| w).sum();
                let mut pick = rng.random_range(0.0..total);
                for (w, d) in components {
                    if pick < *w {
                        return d.sample(rng);
                    }
                    pick -= w;
                }
                components
                    .last()
                    .expect("validated non-empty")
                    .1
                    .sample(rng)
            }
        }
    }
}

/// SLO multipliers: a finite set or a closed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScaleSpec {
    Set { values: Vec<f64> },
    Range { min: f64, max: f64 },
}

impl ScaleSpec {
    fn validate(&self, name: &'static str) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match self {
            ScaleSpec::Set { values } if values.is_empty() || !values.iter().all(|v| ok(*v)) => {
                Err(Error::Config(format!(
                    "{name}: scale set must be non-empty and positive"
                )))
            }
            ScaleSpec::Range { min, max } if !(ok(*min) && ok(*max) && min <= max) => Err(
                Error::Config(format!("{name}: invalid scale range [{min}, {max}]")),
            ),
            _ => Ok(()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScaleSpec::Set { values } => values[rng.random_range(0..values.len())],
            ScaleSpec::Range { min, max } if min == max => *min,
            ScaleSpec::Range { min, max } => rng.random_range(*min..=*max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub num_requests: usize,
    /// Poisson arrival rate, requests per second.
    pub arrival_rate: f64,
    pub long_fraction: f64,
    pub short_len: LengthDist,
    pub long_len: LengthDist,
    pub output_len: LengthDist,
    pub ttft_scale: ScaleSpec,
    pub tbt_scale: ScaleSpec,
    pub offline_fraction: f64,
    /// Multiplier on the isolated service time giving the JCT target.
    pub jct_scale: ScaleSpec,
    /// Relative noise on `predicted_output_len`; 0 is a perfect predictor.
    pub prediction_noise: f64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            num_requests: 1000,
            arrival_rate: 8.0,
            long_fraction: 0.35,
            // Alpaca-like and ShareGPT-like prompts, weighted by trace size.
            short_len: LengthDist::Mixture {
                components: vec![
                    (52.0, LengthDist::Uniform { min: 10, max: 500 }),
                    (90.0, LengthDist::Uniform { min: 10, max: 2048 }),
                ],
            },
            long_len: LengthDist::LogUniform {
                min: 4096,
                max: 100_000,
            },
            output_len: LengthDist::LogUniform { min: 16, max: 2048 },
            ttft_scale: ScaleSpec::Range { min: 0.5, max: 1.5 },
            tbt_scale: ScaleSpec::Range {
                min: 0.75,
                max: 1.25,
            },
            offline_fraction: 0.0,
            jct_scale: ScaleSpec::Range { min: 1.0, max: 2.0 },
            prediction_noise: 0.0,
            seed: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(Error::Config(format!(
                "arrival_rate must be > 0, got {}",
                self.arrival_rate
            )));
        }
        for (name, v) in [
            ("long_fraction", self.long_fraction),
            ("offline_fraction", self.offline_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.prediction_noise) {
            return Err(Error::Config("prediction_noise must lie in [0, 1)".into()));
        }
        self.short_len.validate("short_len")?;
        self.long_len.validate("long_len")?;
        self.output_len.validate("output_len")?;
        self.ttft_scale.validate("ttft_scale")?;
        self.tbt_scale.validate("tbt_scale")?;
        self.jct_scale.validate("jct_scale")
    }
}

/// Isolated prompt-processing latency of the 512-token bucket containing
/// `prompt_len`, evaluated at the bucket midpoint.
pub fn base_ttft(prompt_len: usize, profile: &ModelProfile) -> f64 {
    let bucket = prompt_len.saturating_sub(1) / TTFT_BUCKET_TOKENS;
    let midpoint = bucket * TTFT_BUCKET_TOKENS + TTFT_BUCKET_TOKENS / 2;
    prefill_latency(midpoint, profile)
}

/// Generates a Poisson-arrival mixed-prompt trace. Pure in `cfg`.
pub fn generate_trace(cfg: &TraceConfig, profile: &ModelProfile) -> Result<Vec<RequestSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gaps = Exp::new(cfg.arrival_rate).map_err(|e| Error::Config(e.to_string()))?;

    let mut clock = 0.0;
    let mut out = Vec::with_capacity(cfg.num_requests);
    for id in 0..cfg.num_requests as u64 {
        clock += gaps.sample(&mut rng);
        let long = rng.random_bool(cfg.long_fraction);
        let prompt_len = if long {
            cfg.long_len.sample(&mut rng)
        } else {
            cfg.short_len.sample(&mut rng)
        };
        let output_len = cfg.output_len.sample(&mut rng);
        let offline = rng.random_bool(cfg.offline_fraction);
        let ttft_base = base_ttft(prompt_len, profile);
        let slo = if offline {
            let service = ttft_base + output_len as f64 * BASE_TBT_SLO;
            SloSpec::Offline {
                jct: service * cfg.jct_scale.sample(&mut rng),
            }
        } else {
            let ttft = ttft_base * cfg.ttft_scale.sample(&mut rng);
            let tbt = BASE_TBT_SLO * cfg.tbt_scale.sample(&mut rng);
            SloSpec::Online { ttft, tbt }
        };
        let predicted_output_len = if cfg.prediction_noise > 0.0 {
            let factor = rng.random_range(1.0 - cfg.prediction_noise..=1.0 + cfg.prediction_noise);
            ((output_len as f64 * factor).round() as usize).max(1)
        } else {
            output_len
        };
        out.push(RequestSpec {
            id,
            arrival_time: clock,
            prompt_len,
            output_len,
            predicted_output_len,
            slo,
        });
    }
    Ok(out)
}

/// One JSONL line of a trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    id: RequestId,
    arrival: f64,
    prompt: usize,
    output: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicted_output: Option<usize>,
    slo: SloRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SloRecord {
    kind: SloKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ttft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tbt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    jct: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SloKind {
    Online,
    Offline,
}

impl TraceRecord {
    fn into_spec(self) -> Result<RequestSpec> {
        let slo = match self.slo.kind {
            SloKind::Online => {
                if self.slo.jct.is_some() {
                    return Err(Error::validation("slo.jct", "online SLO cannot carry jct"));
                }
                SloSpec::Online {
                    ttft: self
                        .slo
                        .ttft
                        .ok_or_else(|| Error::validation("slo.ttft", "missing"))?,
                    tbt: self
                        .slo
                        .tbt
                        .ok_or_else(|| Error::validation("slo.tbt", "missing"))?,
                }
            }
            SloKind::Offline => {
                if self.slo.ttft.is_some() || self.slo.tbt.is_some() {
                    return Err(Error::validation(
                        "slo.kind",
                        "offline SLO cannot carry ttft/tbt",
                    ));
                }
                SloSpec::Offline {
                    jct: self
                        .slo
                        .jct
                        .ok_or_else(|| Error::validation("slo.jct", "missing"))?,
                }
            }
        };
        let spec = RequestSpec {
            id: self.id,
            arrival_time: self.arrival,
            prompt_len: self.prompt,
            output_len: self.output,
            predicted_output_len: self.predicted_output.unwrap_or(self.output),
            slo,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn from_spec(spec: &RequestSpec) -> Self {
        let slo = match spec.slo {
            SloSpec::Online { ttft, tbt } => SloRecord {
                kind: SloKind::Online,
                ttft: Some(ttft),
                tbt: Some(tbt),
                jct: None,
            },
            SloSpec::Offline { jct } => SloRecord {
                kind: SloKind::Offline,
                ttft: None,
                tbt: None,
                jct: Some(jct),
            },
        };
        TraceRecord {
            id: spec.id,
            arrival: spec.arrival_time,
            prompt: spec.prompt_len,
            output: spec.output_len,
            predicted_output: (spec.predicted_output_len != spec.output_len)
                .then_some(spec.predicted_output_len),
            slo,
        }
    }
}

/// Parses a JSONL trace. Blank lines are ignored; the result is sorted by
/// arrival time (stable, so equal arrivals keep file order).
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<RequestSpec>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let spec = record.into_spec().map_err(|e| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("line {lineno}: {message}"),
            },
            other => other,
        })?;
        if !seen.insert(spec.id) {
            return Err(Error::validation(
                "id",
                format!("line {lineno}: duplicate request id {}", spec.id),
            ));
        }
        out.push(spec);
    }
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(out)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<RequestSpec>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace(BufReader::new(file))
}

pub fn write_trace_to<W: Write>(mut w: W, trace: &[RequestSpec]) -> std::io::Result<()> {
    for spec in trace {
        let line = serde_json::to_string(&TraceRecord::from_spec(spec))
            .expect("trace records always serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[RequestSpec]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_trace_to(&mut w, trace)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub count: usize,
    pub long_fraction: f64,
    pub offline_fraction: f64,
    pub arrival_rate: f64,
    pub mean_prompt_len: f64,
    pub mean_output_len: f64,
}

pub fn summarize(trace: &[RequestSpec], long_threshold: usize) -> TraceSummary {
    let n = trace.len().max(1) as f64;
    let span = trace.last().map(|r| r.arrival_time).unwrap_or(0.0);
    TraceSummary {
        count: trace.len(),
        long_fraction: trace.iter().filter(|r| r.is_long(long_threshold)).count() as f64 / n,
        offline_fraction: trace.iter().filter(|r| r.slo.is_offline()).count() as f64 / n,
        arrival_rate: if span > 0.0 {
            trace.len() as f64 / span
        } else {
            0.0
        },
        mean_prompt_len: trace.iter().map(|r| r.prompt_len as f64).sum::<f64>() / n,
        mean_output_len: trace.iter().map(|r| r.output_len as f64).sum::<f64>() / n,
    }
}
