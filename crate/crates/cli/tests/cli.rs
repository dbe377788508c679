use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slosim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slosim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn gen_writes_reproducible_trace() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = slosim(
            &["gen", "--requests", "1000", "--seed", "7", "--out", name],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stderr(&out).contains("1000 requests"));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 1000);
}

#[test]
fn zero_rate_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = slosim(&["gen", "--rate", "0", "--out", "t.jsonl"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("arrival_rate"), "{}", stderr(&out));
}

#[test]
fn run_emits_one_row_per_policy_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "run",
        "--requests",
        "60",
        "--seed",
        "3",
        "--policy",
        "paged_fcfs",
        "--policy",
        "accelgen",
    ];
    let first = slosim(&args, dir.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let csv = stdout(&first);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("policy,tokens_per_s,reqs_per_s,goodput,slo_attainment"));
    assert!(lines[1].starts_with("paged_fcfs,"));
    assert!(lines[2].starts_with("accelgen,"));
    let second = slosim(&args, dir.path());
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn run_out_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let out = slosim(
        &["run", "--requests", "40", "--seed", "5", "--out", "res"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("res/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let cmp = slosim(
        &[
            "compare",
            "--baseline",
            "paged_fcfs",
            "--out",
            "cmp.json",
            "res/report.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&cmp), 0, "{}", stderr(&cmp));
    let table = stdout(&cmp);
    let header = table.lines().next().unwrap();
    let columns: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(
        columns,
        ["vs", "paged_fcfs", "orca_fcfs", "static_chunk", "accelgen"]
    );
    assert!(table.lines().any(|l| l.starts_with("goodput")));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cmp.json")).unwrap()).unwrap();
    assert_eq!(json["baseline"], "paged_fcfs");
    assert_eq!(json["policies"].as_array().unwrap().len(), 3);
}

#[test]
fn compare_against_itself_gives_unit_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = slosim(
        &[
            "run",
            "--requests",
            "30",
            "--policy",
            "accelgen",
            "--out",
            "a",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let mut copy: serde_json::Value = serde_json::from_str(&report).unwrap();
    copy[0]["policy"] = "again".into();
    fs::write(dir.path().join("b.json"), copy.to_string()).unwrap();
    let cmp = slosim(
        &[
            "compare",
            "--baseline",
            "accelgen",
            "a/report.json",
            "b.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&cmp), 0, "{}", stderr(&cmp));
    for line in stdout(&cmp).lines().skip(1) {
        let cell = line.split_whitespace().last().unwrap();
        assert!(cell == "1.000" || cell == "-", "{line}");
    }
}

#[test]
fn compare_refuses_reports_from_different_traces() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, name) in [("1", "a"), ("2", "b")] {
        let out = slosim(
            &[
                "run",
                "--requests",
                "20",
                "--seed",
                seed,
                "--policy",
                "paged_fcfs",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let cmp = slosim(
        &[
            "compare",
            "--baseline",
            "paged_fcfs",
            "a/report.json",
            "b/report.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&cmp), 1);
    assert!(stderr(&cmp).contains("different trace"), "{}", stderr(&cmp));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--profile", "absent.toml"][..],
        &["run", "--gpu", "absent.toml"][..],
        &["run", "--trace", "absent.jsonl"][..],
        &["calibrate", "--profile", "absent.toml"][..],
    ] {
        let out = slosim(args, dir.path());
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn profile_and_gpu_files_feed_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("model.toml"),
        "preset = \"opt-13b\"\npivot_time_s = 0.05\n",
    )
    .unwrap();
    fs::write(dir.path().join("gpu.toml"), "kvc_capacity_tokens = 65536\n").unwrap();
    let out = slosim(
        &[
            "run",
            "--requests",
            "20",
            "--profile",
            "model.toml",
            "--gpu",
            "gpu.toml",
            "--policy",
            "accelgen",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let preset = slosim(
        &[
            "run",
            "--requests",
            "20",
            "--profile",
            "opt-13b",
            "--policy",
            "accelgen",
        ],
        dir.path(),
    );
    assert_eq!(code(&preset), 0, "{}", stderr(&preset));
    assert_ne!(out.stdout, preset.stdout);
}

#[test]
fn calibrate_fills_missing_pivot_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("model.toml"), "preset = \"opt-13b\"\n").unwrap();
    fs::write(
        dir.path().join("gpu.toml"),
        "peak_flops = 312e12\nsaturation_efficiency = 0.6\n",
    )
    .unwrap();
    let out = slosim(
        &[
            "calibrate",
            "--profile",
            "model.toml",
            "--gpu",
            "gpu.toml",
            "--out",
            "done.toml",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let done = fs::read_to_string(dir.path().join("done.toml")).unwrap();
    assert!(done.contains("pivot_forward_size"), "{done}");
    assert!(done.contains("pivot_time_s"), "{done}");

    let again = slosim(
        &["calibrate", "--profile", "done.toml", "--out", "again.toml"],
        dir.path(),
    );
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(
        done,
        fs::read_to_string(dir.path().join("again.toml")).unwrap()
    );

    let missing = slosim(&["calibrate", "--profile", "model.toml"], dir.path());
    assert_eq!(code(&missing), 1);
    assert!(
        stderr(&missing).contains("peak_flops"),
        "{}",
        stderr(&missing)
    );
}

#[test]
fn horizon_marks_truncated_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = slosim(
        &[
            "run",
            "--requests",
            "200",
            "--horizon",
            "1",
            "--policy",
            "accelgen",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).lines().nth(1).unwrap().ends_with(",true"));
}
