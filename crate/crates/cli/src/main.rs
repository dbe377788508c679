use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slosim::config::{GpuSpec, ProfileSpec, RunConfig, TraceSource};
use slosim::metrics::{compare_reports, write_csv, MetricsReport};
use slosim::workload::{generate_trace, load_trace, summarize, write_trace, RequestSpec};
use slosim::{simulate, Error, PolicyConfig, PolicyKind, Result};

#[derive(Parser)]
#[command(
    name = "slosim",
    version,
    about = "LLM serving simulator with SLO-aware batching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace as JSON lines.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output trace file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one or more policies on a trace and report metrics.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trace file to replay instead of the configured source.
        #[arg(long, conflicts_with = "gen")]
        trace: Option<PathBuf>,
        /// Force a generated trace even if the config names a file.
        #[arg(long)]
        gen: bool,
        /// Policy to run; repeat for several. Defaults to all four.
        #[arg(long = "policy", value_parser = parse_policy)]
        policies: Vec<PolicyKind>,
        /// Stop simulated time at this many seconds.
        #[arg(long)]
        horizon: Option<f64>,
        /// Directory for report.csv and report.json; CSV goes to stdout
        /// otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-metric ratios of each policy to a baseline policy.
    Compare {
        /// Policy label of the baseline.
        #[arg(long)]
        baseline: String,
        /// Report files written by `run --out` (report.json).
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the comparison as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill the pivot forward size and pivot time of a profile from GPU
    /// throughput, keeping values already present.
    Calibrate {
        /// Profile file to complete.
        #[arg(long)]
        profile: PathBuf,
        /// GPU profile file with peak_flops and saturation_efficiency.
        #[arg(long)]
        gpu: Option<PathBuf>,
        /// Destination; the completed profile goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset (opt-13b, opt-175b) or profile file.
    #[arg(long)]
    profile: Option<String>,
    /// GPU profile file.
    #[arg(long)]
    gpu: Option<PathBuf>,
    /// KV-cache capacity in tokens.
    #[arg(long = "kvc-tokens")]
    kvc_tokens: Option<usize>,
    /// Trace generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of generated requests.
    #[arg(long)]
    requests: Option<usize>,
    /// Mean arrival rate of generated requests (per second).
    #[arg(long)]
    rate: Option<f64>,
}

const PRESETS: [&str; 2] = ["opt-13b", "opt-175b"];

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse()
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        match self.profile.as_deref() {
            Some(p) if PRESETS.contains(&p) => cfg.profile.preset = Some(p.to_string()),
            Some(path) => cfg.profile = ProfileSpec::load(path)?,
            None => {}
        }
        if let Some(path) = &self.gpu {
            cfg.profile.apply_gpu(&GpuSpec::load(path)?);
        }
        if let Some(k) = self.kvc_tokens {
            cfg.profile.kvc_capacity_tokens = Some(k);
        }
        if let Some(k) = cfg.profile.kvc_capacity_tokens {
            cfg.engine.kvc_capacity_tokens = k;
        }
        if self.seed.is_some() || self.requests.is_some() || self.rate.is_some() {
            let TraceSource::Generated(t) = &mut cfg.trace else {
                return Err(Error::Config(
                    "--seed, --requests and --rate apply to generated traces only".into(),
                ));
            };
            if let Some(s) = self.seed {
                t.seed = s;
            }
            if let Some(n) = self.requests {
                t.num_requests = n;
            }
            if let Some(r) = self.rate {
                t.arrival_rate = r;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn trace_for(cfg: &RunConfig) -> Result<Vec<RequestSpec>> {
    let profile = cfg.profile.model()?;
    match &cfg.trace {
        TraceSource::File { path } => load_trace(path),
        TraceSource::Generated(t) => generate_trace(t, &profile),
    }
}

fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let csv_path = dir.join("report.csv");
    let file = File::create(&csv_path).map_err(|e| Error::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    write_csv(BufWriter::new(file), reports).map_err(|e| Error::Io {
        path: csv_path,
        source: io::Error::other(e),
    })?;
    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(reports).expect("reports serialize");
    fs::write(&json_path, text + "\n").map_err(|e| Error::Io {
        path: json_path,
        source: e,
    })
}

fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: not a report file: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = common.load()?;
            let TraceSource::Generated(t) = &cfg.trace else {
                return Err(Error::Config(
                    "config names a trace file, nothing to generate".into(),
                ));
            };
            let trace = generate_trace(t, &cfg.profile.model()?)?;
            write_trace(&out, &trace)?;
            let s = summarize(&trace, cfg.engine.long_prompt_threshold);
            eprintln!(
                "{} requests, {:.1}% long, {:.2} req/s, mean prompt {:.0}, mean output {:.0}",
                s.count,
                100.0 * s.long_fraction,
                s.arrival_rate,
                s.mean_prompt_len,
                s.mean_output_len
            );
            Ok(())
        }
        Command::Run {
            common,
            trace,
            gen,
            policies,
            horizon,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(path) = trace {
                cfg.trace = TraceSource::File { path };
            } else if gen {
                if let TraceSource::File { .. } = cfg.trace {
                    cfg.trace = TraceSource::default();
                }
            }
            if horizon.is_some() {
                cfg.engine.horizon_s = horizon;
                cfg.engine.validate()?;
            }
            let policy_list: Vec<PolicyConfig> = if policies.is_empty() {
                cfg.policy_list()
            } else {
                policies.into_iter().map(PolicyConfig::new).collect()
            };
            let trace = trace_for(&cfg)?;
            let profile = cfg.profile.model()?;
            log::info!(
                "simulating {} requests under {} policies",
                trace.len(),
                policy_list.len()
            );

            let results: Vec<Result<MetricsReport>> = std::thread::scope(|s| {
                let handles: Vec<_> = policy_list
                    .iter()
                    .map(|p| {
                        let (trace, profile, engine) = (&trace, &profile, &cfg.engine);
                        s.spawn(move || simulate(trace, p, profile, engine).map(|r| r.report))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("simulation thread panicked"))
                    .collect()
            });
            let reports = results.into_iter().collect::<Result<Vec<_>>>()?;
            for r in reports.iter().filter(|r| r.truncated) {
                log::warn!(
                    "{}: run hit the horizon; metrics cover a partial run",
                    r.policy
                );
            }
            match out {
                Some(dir) => write_reports(&dir, &reports),
                None => write_csv(io::stdout().lock(), &reports).map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: io::Error::other(e),
                }),
            }
        }
        Command::Compare {
            baseline,
            reports,
            out,
        } => {
            let mut all = Vec::new();
            for path in &reports {
                all.extend(read_reports(path)?);
            }
            let cmp = compare_reports(&all, &baseline)?;
            let mut stdout = io::stdout().lock();
            let mut line = |s: String| {
                let _ = writeln!(stdout, "{s}");
            };
            let header: String = cmp.policies.iter().map(|p| format!(" {p:>14}")).collect();
            line(format!("{:<16}{header}", format!("vs {}", cmp.baseline)));
            for (metric, row) in &cmp.ratios {
                let cells: String = row
                    .iter()
                    .map(|r| match r {
                        Some(v) => format!(" {v:>14.3}"),
                        None => format!(" {:>14}", "-"),
                    })
                    .collect();
                line(format!("{metric:<16}{cells}"));
            }
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&cmp).expect("comparison serializes");
                fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(())
        }
        Command::Calibrate { profile, gpu, out } => {
            let mut spec = ProfileSpec::load(&profile)?;
            if let Some(path) = gpu {
                spec.apply_gpu(&GpuSpec::load(path)?);
            }
            let done = spec.complete()?;
            let text = toml::to_string(&done).expect("profile serializes");
            match out {
                Some(path) => fs::write(&path, text).map_err(|e| Error::Io { path, source: e }),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOSIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
