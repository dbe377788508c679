//! Run-level metrics computed from per-request and per-iteration records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sched_core::JctBudget;
use crate::workload::{RequestId, RequestSpec, SloSpec};

/// What happened to one request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestOutcome {
    pub spec: RequestSpec,
    /// Output token emission times.
    pub emissions: Vec<f64>,
    /// Prompt chunk lengths in processing order.
    pub chunks: Vec<usize>,
    pub first_scheduled: Option<f64>,
    /// Iteration index at which the request first ran.
    pub admitted_iteration: Option<u64>,
    pub finished_at: Option<f64>,
    pub rejected: bool,
    pub preemptions: usize,
    pub jct_budget: Option<JctBudget>,
}

impl RequestOutcome {
    pub fn new(spec: RequestSpec) -> Self {
        RequestOutcome {
            spec,
            emissions: Vec::new(),
            chunks: Vec::new(),
            first_scheduled: None,
            admitted_iteration: None,
            finished_at: None,
            rejected: false,
            preemptions: 0,
            jct_budget: None,
        }
    }

    pub fn id(&self) -> RequestId {
        self.spec.id
    }

    pub fn jct(&self) -> Option<f64> {
        self.finished_at.map(|t| t - self.spec.arrival_time)
    }

    /// Emission times of tokens that met their per-token deadline: the
    /// first within TTFT of arrival, each later one within TBT of the
    /// previous emission.
    pub fn timely_emissions(&self) -> Vec<f64> {
        let SloSpec::Online { ttft, tbt } = self.spec.slo else {
            return Vec::new();
        };
        let mut prev = self.spec.arrival_time;
        let mut out = Vec::new();
        for (k, &t) in self.emissions.iter().enumerate() {
            let limit = if k == 0 { ttft } else { tbt };
            if t - prev <= limit + 1e-12 {
                out.push(t);
            }
            prev = t;
        }
        out
    }

    /// Completed, and every token (online) or the whole job (offline) was
    /// on time.
    pub fn met_every_slo(&self) -> bool {
        if self.finished_at.is_none() {
            return false;
        }
        match self.spec.slo {
            SloSpec::Online { .. } => self.timely_emissions().len() == self.spec.output_len,
            SloSpec::Offline { .. } => self.meets_jct() == Some(true),
        }
    }

    pub fn meets_jct(&self) -> Option<bool> {
        let SloSpec::Offline { jct } = self.spec.slo else {
            return None;
        };
        Some(self.jct().is_some_and(|j| j <= jct + 1e-12))
    }
}

/// One executed iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub start: f64,
    pub duration: f64,
    pub forward_size: usize,
    pub token_budget: usize,
    /// KV tokens held, or reserved under max-length reservation.
    pub kvc_tokens: usize,
    pub selected: usize,
    pub preempted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub policy: String,
    pub trace_digest: String,
    pub num_requests: usize,
    pub completed: usize,
    pub rejected: usize,
    pub makespan_s: f64,
    pub iterations: usize,
    pub tokens_per_s: f64,
    pub reqs_per_s: f64,
    /// Completions per second that met every deadline, averaged over
    /// fixed windows.
    pub goodput: f64,
    /// The same count divided by the makespan.
    pub goodput_total: f64,
    /// Fraction of online output tokens that met their deadline.
    pub slo_attainment: f64,
    pub ttft_attainment: f64,
    pub jct_slo_attainment: Option<f64>,
    pub jct_mean: Option<f64>,
    pub jct_p5: Option<f64>,
    pub jct_p95: Option<f64>,
    pub jct_total: f64,
    pub gpu_util_mean: f64,
    pub kvc_util_mean: f64,
    pub preemptions: usize,
    pub truncated: bool,
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Inputs to [`compute_metrics`] beyond the records.
pub struct RunSummary<'a> {
    pub policy: String,
    pub trace_digest: String,
    pub requests: &'a [RequestOutcome],
    pub iterations: &'a [IterationRecord],
    pub end_time: f64,
    pub pivot_forward_size: usize,
    pub kvc_capacity_tokens: usize,
    pub window: f64,
    pub truncated: bool,
}

pub fn compute_metrics(run: &RunSummary<'_>) -> MetricsReport {
    let reqs = run.requests;
    let makespan = run.end_time.max(f64::MIN_POSITIVE);
    let completed = reqs.iter().filter(|r| r.finished_at.is_some()).count();
    let tokens: usize = reqs
        .iter()
        .map(|r| r.chunks.iter().sum::<usize>() + r.emissions.len())
        .sum();

    let mut online_tokens = 0usize;
    let mut online_first = 0usize;
    let mut first_ok = 0usize;
    let mut timely = 0usize;
    for r in reqs.iter().filter(|r| !r.spec.slo.is_offline()) {
        online_tokens += r.spec.output_len;
        online_first += 1;
        let ok = r.timely_emissions();
        if let (Some(&e0), Some(&t0)) = (r.emissions.first(), ok.first()) {
            first_ok += usize::from(e0 == t0);
        }
        timely += ok.len();
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };

    let good: Vec<f64> = reqs
        .iter()
        .filter(|r| r.met_every_slo())
        .filter_map(|r| r.finished_at)
        .collect();
    let n_windows = (makespan / run.window).ceil().max(1.0) as usize;
    let mut per_window = vec![0usize; n_windows];
    for &t in &good {
        let w = ((t / run.window) as usize).min(n_windows - 1);
        per_window[w] += 1;
    }
    let goodput_windowed = per_window
        .iter()
        .map(|&c| c as f64 / run.window)
        .sum::<f64>()
        / n_windows as f64;

    let offline: Vec<bool> = reqs.iter().filter_map(|r| r.meets_jct()).collect();
    let jct_slo_attainment = (!offline.is_empty())
        .then(|| offline.iter().filter(|&&ok| ok).count() as f64 / offline.len() as f64);

    let mut jcts: Vec<f64> = reqs.iter().filter_map(|r| r.jct()).collect();
    jcts.sort_by(f64::total_cmp);
    let jct_total: f64 = jcts.iter().sum();
    let jct_mean = (!jcts.is_empty()).then(|| jct_total / jcts.len() as f64);

    let n_it = run.iterations.len().max(1) as f64;
    let gpu_util_mean = run
        .iterations
        .iter()
        .map(|it| it.forward_size as f64 / it.token_budget.max(1) as f64)
        .sum::<f64>()
        / n_it;
    let kvc_util_mean = run
        .iterations
        .iter()
        .map(|it| it.kvc_tokens as f64 / run.kvc_capacity_tokens.max(1) as f64)
        .sum::<f64>()
        / n_it;

    MetricsReport {
        policy: run.policy.clone(),
        trace_digest: run.trace_digest.clone(),
        num_requests: reqs.len(),
        completed,
        rejected: reqs.iter().filter(|r| r.rejected).count(),
        makespan_s: run.end_time,
        iterations: run.iterations.len(),
        tokens_per_s: tokens as f64 / makespan,
        reqs_per_s: completed as f64 / makespan,
        goodput: goodput_windowed,
        goodput_total: good.len() as f64 / makespan,
        slo_attainment: ratio(timely, online_tokens),
        ttft_attainment: ratio(first_ok, online_first),
        jct_slo_attainment,
        jct_mean,
        jct_p5: percentile(&jcts, 5.0),
        jct_p95: percentile(&jcts, 95.0),
        jct_total,
        gpu_util_mean,
        kvc_util_mean,
        preemptions: reqs.iter().map(|r| r.preemptions).sum(),
        truncated: run.truncated,
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "policy",
    "tokens_per_s",
    "reqs_per_s",
    "goodput",
    "slo_attainment",
    "jct_slo_attainment",
    "jct_mean",
    "jct_p5",
    "jct_p95",
    "gpu_util_mean",
    "kvc_util_mean",
    "preemptions",
    "truncated",
];

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fixed).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.policy.clone(),
            fixed(self.tokens_per_s),
            fixed(self.reqs_per_s),
            fixed(self.goodput),
            fixed(self.slo_attainment),
            opt(self.jct_slo_attainment),
            opt(self.jct_mean),
            opt(self.jct_p5),
            opt(self.jct_p95),
            fixed(self.gpu_util_mean),
            fixed(self.kvc_util_mean),
            self.preemptions.to_string(),
            self.truncated.to_string(),
        ]
    }
}

/// Writes one CSV row per report under a fixed header.
pub fn write_csv<W: Write>(w: W, reports: &[MetricsReport]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in reports {
        out.write_record(r.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

/// Metrics compared across policies, in table order.
pub const COMPARED_METRICS: [&str; 8] = [
    "tokens_per_s",
    "reqs_per_s",
    "goodput",
    "slo_attainment",
    "ttft_attainment",
    "jct_mean",
    "gpu_util_mean",
    "kvc_util_mean",
];

impl MetricsReport {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "tokens_per_s" => Some(self.tokens_per_s),
            "reqs_per_s" => Some(self.reqs_per_s),
            "goodput" => Some(self.goodput),
            "slo_attainment" => Some(self.slo_attainment),
            "ttft_attainment" => Some(self.ttft_attainment),
            "jct_mean" => self.jct_mean,
            "gpu_util_mean" => Some(self.gpu_util_mean),
            "kvc_util_mean" => Some(self.kvc_util_mean),
            _ => None,
        }
    }
}

/// Per-metric ratios of each policy to a baseline policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    /// Compared policies, one ratio column each.
    pub policies: Vec<String>,
    /// `(metric, ratio per policy)`; `None` where the baseline value is 0
    /// or missing.
    pub ratios: Vec<(String, Vec<Option<f64>>)>,
}

/// Ratios of every report to the one labelled `baseline`. All reports must
/// come from the same trace.
pub fn compare_reports(reports: &[MetricsReport], baseline: &str) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config(format!(
            "comparison needs at least two reports, got {}",
            reports.len()
        )));
    }
    if let Some(r) = reports
        .iter()
        .find(|r| r.trace_digest != reports[0].trace_digest)
    {
        return Err(Error::Config(format!(
            "report `{}` was produced from a different trace than `{}`",
            r.policy, reports[0].policy
        )));
    }
    let base = reports
        .iter()
        .find(|r| r.policy == baseline)
        .ok_or_else(|| Error::Config(format!("no report for baseline policy `{baseline}`")))?;
    let others: Vec<&MetricsReport> = reports.iter().filter(|r| r.policy != baseline).collect();
    let ratios = COMPARED_METRICS
        .iter()
        .map(|&m| {
            let row = others
                .iter()
                .map(|r| match (r.metric(m), base.metric(m)) {
                    (Some(a), Some(b)) if a == b => Some(1.0),
                    (Some(a), Some(b)) if b != 0.0 => Some(a / b),
                    _ => None,
                })
                .collect();
            (m.to_string(), row)
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_string(),
        policies: others.iter().map(|r| r.policy.clone()).collect(),
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(slo: SloSpec, arrival: f64, emissions: Vec<f64>) -> RequestOutcome {
        let n = emissions.len();
        let mut r = RequestOutcome::new(RequestSpec {
            id: 0,
            arrival_time: arrival,
            prompt_len: 10,
            output_len: n.max(1),
            predicted_output_len: n.max(1),
            slo,
        });
        r.finished_at = emissions.last().copied();
        r.emissions = emissions;
        r
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), Some(3.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 100.0), Some(5.0));
        assert!((percentile(&v, 5.0).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(percentile(&[], 5.0), None);
    }

    #[test]
    fn timely_tokens_follow_ttft_then_tbt() {
        let r = outcome(
            SloSpec::Online {
                ttft: 1.0,
                tbt: 0.2,
            },
            0.0,
            vec![0.9, 1.0, 1.5, 1.6],
        );
        assert_eq!(r.timely_emissions(), vec![0.9, 1.0, 1.6]);
        let late = outcome(
            SloSpec::Online {
                ttft: 0.5,
                tbt: 0.2,
            },
            0.0,
            vec![0.9],
        );
        assert!(late.timely_emissions().is_empty());
    }

    #[test]
    fn offline_jct_check() {
        let r = outcome(SloSpec::Offline { jct: 2.0 }, 1.0, vec![2.5, 3.0]);
        assert_eq!(r.meets_jct(), Some(true));
        let r = outcome(SloSpec::Offline { jct: 1.0 }, 1.0, vec![2.5, 3.0]);
        assert_eq!(r.meets_jct(), Some(false));
    }

    #[test]
    fn csv_has_fixed_columns() {
        let mut reqs = vec![outcome(
            SloSpec::Online {
                ttft: 1.0,
                tbt: 1.0,
            },
            0.0,
            vec![0.5, 1.0],
        )];
        reqs[0].chunks = vec![10];
        let its = vec![IterationRecord {
            start: 0.0,
            duration: 1.0,
            forward_size: 384,
            token_budget: 768,
            kvc_tokens: 64,
            selected: 1,
            preempted: 0,
        }];
        let m = compute_metrics(&RunSummary {
            policy: "p".into(),
            trace_digest: String::new(),
            requests: &reqs,
            iterations: &its,
            end_time: 2.0,
            pivot_forward_size: 768,
            kvc_capacity_tokens: 128,
            window: 1.0,
            truncated: false,
        });
        assert_eq!(m.tokens_per_s, 6.0);
        assert_eq!(m.goodput, 0.5);
        assert_eq!(m.goodput_total, 0.5);
        assert_eq!(m.slo_attainment, 1.0);
        assert_eq!(m.gpu_util_mean, 0.5);
        assert_eq!(m.kvc_util_mean, 0.5);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[m]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "p,6.000000,0.500000,0.500000,1.000000,,1.000000,1.000000,1.000000,0.500000,0.500000,0,false"
        );
    }

    fn report(policy: &str, goodput: f64) -> MetricsReport {
        MetricsReport {
            policy: policy.into(),
            trace_digest: "d".into(),
            num_requests: 1,
            completed: 1,
            rejected: 0,
            makespan_s: 1.0,
            iterations: 1,
            tokens_per_s: 100.0,
            reqs_per_s: 1.0,
            goodput,
            goodput_total: goodput,
            slo_attainment: 0.5,
            ttft_attainment: 0.5,
            jct_slo_attainment: None,
            jct_mean: Some(2.0),
            jct_p5: None,
            jct_p95: None,
            jct_total: 2.0,
            gpu_util_mean: 0.5,
            kvc_util_mean: 0.0,
            preemptions: 0,
            truncated: false,
        }
    }

    #[test]
    fn comparison_ratios() {
        let reports = [
            report("paged_fcfs", 1.0),
            report("accelgen", 2.0),
            report("orca_fcfs", 0.5),
        ];
        let c = compare_reports(&reports, "paged_fcfs").unwrap();
        assert_eq!(c.policies, ["accelgen", "orca_fcfs"]);
        let goodput = &c.ratios.iter().find(|(m, _)| m == "goodput").unwrap().1;
        assert_eq!(goodput, &[Some(2.0), Some(0.5)]);
        for (m, row) in &c.ratios {
            if m != "goodput" {
                assert_eq!(row, &[Some(1.0), Some(1.0)], "{m}");
            }
        }
    }

    #[test]
    fn comparison_refuses_mixed_traces_and_missing_baseline() {
        let mut other = report("accelgen", 2.0);
        other.trace_digest = "e".into();
        let err = compare_reports(&[report("paged_fcfs", 1.0), other], "paged_fcfs").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let two = [report("paged_fcfs", 1.0), report("accelgen", 2.0)];
        assert!(compare_reports(&two, "static_chunk").is_err());
        assert!(compare_reports(&two[..1], "paged_fcfs").is_err());
    }
}
