use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gdsrq::analysis::read_trajectory_csv;
use gdsrq::experiment::{read_combined_csv, ExperimentConfig, Instance};

fn gdsrq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdsrq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig, extra: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, format!("{}{extra}", cfg.to_text())).unwrap();
    path.to_str().unwrap().to_owned()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn run_writes_trajectory_with_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::reference_experiment(4, 1);
    let config = write_config(dir.path(), "run.cfg", &cfg, "");
    let out = dir.path().join("out");
    let o = gdsrq(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + (10_000 / 10 + 1));
    assert!(csv.starts_with("k,r_k,consensus_sq,gap_z,gap_xbar\n"));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    for needle in [
        "gap_z",
        "fitted tail slope",
        "predicted rate exponent",
        "all conditions pass",
    ] {
        assert!(
            summary.contains(needle),
            "summary lacks {needle}: {summary}"
        );
    }
    for file in [
        "reference.txt",
        "graph_edges.txt",
        "graph_coords.txt",
        "mixing.csv",
        "config.txt",
    ] {
        assert!(out.join(file).exists(), "{file} missing");
    }
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::reference_experiment(4, 1);
    let config = write_config(dir.path(), "run.cfg", &cfg, "");
    let out = dir.path().join("out");
    let o = gdsrq(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--iters",
        "250",
        "--bits",
        "0",
        "--seed",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let records = read_trajectory_csv(&out.join("trajectory.csv")).unwrap();
    assert_eq!(records.last().unwrap().k, 250);
    assert_eq!(records.len(), 26);
    let written = ExperimentConfig::read(&out.join("config.txt")).unwrap();
    assert_eq!(
        (written.bits, written.seed, written.iterations),
        (0, 9, 250)
    );
}

#[test]
fn invalid_schedule_exits_two_and_names_condition() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::reference_experiment(4, 1);
    cfg.lambda_beta = 0.5;
    cfg.iterations = 100;
    let config = write_config(dir.path(), "bad.cfg", &cfg, "");
    let out = dir.path().join("out");
    let o = gdsrq(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        text(&o.stderr).contains("lambda_beta_range"),
        "{}",
        text(&o.stderr)
    );
    assert!(!out.join("trajectory.csv").exists());

    let o = gdsrq(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--waive-validation",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("FAILED"));
}

#[test]
fn runtime_errors_exit_one_with_key_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.cfg");
    fs::write(&path, "n_agents = 5\ndim = 2\nradius = 0.5\n").unwrap();
    let o = gdsrq(&[
        "run",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    for key in [
        "bits",
        "alpha0",
        "lambda_gamma",
        "iterations",
        "seed",
        "objective",
    ] {
        assert!(err.contains(key), "{key} not reported: {err}");
    }
    let o = gdsrq(&[
        "validate",
        "--config",
        dir.path().join("absent.cfg").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::reference_experiment(2, 17);
    cfg.iterations = 2_000;
    let config = write_config(dir.path(), "run.cfg", &cfg, "");
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let out = dir.path().join(name);
        let o = gdsrq(&[
            "--threads",
            threads,
            "run",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
        outputs.push(fs::read(out.join("trajectory.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn bit_sweep_artifacts_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::reference_experiment(4, 1);
    let config = write_config(
        dir.path(),
        "sweep.cfg",
        &cfg,
        "sweep = bits\nvalues = 2, 4, 6, 8\nseeds_per_cell = 10\n",
    );
    let out = dir.path().join("sweep");
    let o = gdsrq(&["sweep", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let mut trajectories = 0;
    for b in [2, 4, 6, 8] {
        for entry in fs::read_dir(out.join("cells").join(format!("bits={b}"))).unwrap() {
            let path = entry.unwrap().path();
            assert_eq!(path.extension().unwrap(), "csv");
            trajectories += 1;
        }
    }
    assert_eq!(trajectories, 40);
    let svgs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "svg")
        })
        .count();
    assert_eq!(svgs, 1);
    let combined =
        read_combined_csv(&fs::read_to_string(out.join("combined.csv")).unwrap()).unwrap();
    let labels: Vec<&str> = combined.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["bits=2", "bits=4", "bits=6", "bits=8"]);
    let final_gap = |i: usize| combined[i].1.last().unwrap().1;
    assert!(
        final_gap(3) <= final_gap(0),
        "b=8 {} vs b=2 {}",
        final_gap(3),
        final_gap(0)
    );
    let svg = fs::read_to_string(out.join("gap_z.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}

#[test]
fn single_value_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::reference_experiment(4, 3);
    cfg.iterations = 1_500;
    let run_cfg = write_config(dir.path(), "run.cfg", &cfg, "");
    let sweep_cfg = write_config(dir.path(), "sweep.cfg", &cfg, "sweep = bits\nvalues = 4\n");
    let run_out = dir.path().join("run");
    let sweep_out = dir.path().join("sweep");
    assert_eq!(
        gdsrq(&[
            "run",
            "--config",
            &run_cfg,
            "--out",
            run_out.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        gdsrq(&[
            "sweep",
            "--config",
            &sweep_cfg,
            "--out",
            sweep_out.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    let a = fs::read(run_out.join("trajectory.csv")).unwrap();
    let b = fs::read(sweep_out.join("cells").join("bits=4").join("seed_3.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn failing_sweep_cells_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::reference_experiment(4, 3);
    cfg.iterations = 200;
    let config = write_config(
        dir.path(),
        "sweep.cfg",
        &cfg,
        "sweep = lambda_beta\nvalues = 0.6, 0.5\n",
    );
    let out = dir.path().join("sweep");
    let o = gdsrq(&["sweep", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        text(&o.stderr).contains("lambda_beta=0.5"),
        "{}",
        text(&o.stderr)
    );
    assert!(out
        .join("cells")
        .join("lambda_beta=0.6")
        .join("seed_3.csv")
        .exists());
    let combined = fs::read_to_string(out.join("combined.csv")).unwrap();
    assert!(combined.starts_with("k,lambda_beta=0.6\n"));
}

#[test]
fn validate_reports_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::reference_experiment(4, 1);
    let good = write_config(dir.path(), "good.cfg", &cfg, "");
    let o = gdsrq(&["validate", "--config", &good]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stdout));
    assert!(!text(&o.stdout).contains("FAIL "));

    let mut low = cfg.clone();
    low.lambda_alpha = 0.4;
    low.lambda_gamma = 1.0;
    let low = write_config(dir.path(), "low.cfg", &low, "");
    let o = gdsrq(&["validate", "--config", &low]);
    assert_eq!(o.status.code(), Some(2));
    let report = text(&o.stdout);
    let line = report
        .lines()
        .find(|l| l.contains("lambda_alpha_range"))
        .unwrap();
    assert!(line.starts_with("FAIL"), "{line}");

    let sigma2 = Instance::build(&cfg, cfg.seed).unwrap().mixing.sigma2();
    let mut heavy = cfg.clone();
    heavy.beta0 = 1.01 / (1.0 - sigma2);
    let heavy_path = write_config(dir.path(), "heavy.cfg", &heavy, "");
    let o = gdsrq(&["validate", "--config", &heavy_path]);
    assert_eq!(o.status.code(), Some(2));
    let report = text(&o.stdout);
    let line = report
        .lines()
        .find(|l| l.contains("spectral_gap_beta0"))
        .unwrap();
    assert!(line.starts_with("FAIL"), "{line}");
    assert!(
        line.contains(&sigma2.to_string()) && line.contains(&heavy.beta0.to_string()),
        "{line}"
    );
}
