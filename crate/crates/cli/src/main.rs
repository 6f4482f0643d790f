use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gdsrq::experiment::{run_experiment, sweep, validate_experiment, ExperimentConfig, SweepSpec};
use gdsrq::Error;

/// Distributed subgradient experiments with randomly quantized communication.
#[derive(Parser)]
#[command(name = "gdsrq", version)]
struct Cli {
    /// Worker threads (defaults to the number of cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its trajectory and summary.
    Run(RunArgs),
    /// Run every (value, seed) cell of a sweep spec.
    Sweep(RunArgs),
    /// Check the step-size schedule conditions for a configuration.
    Validate(Overrides),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Quantizer bits; 0 means exact (unquantized) exchange.
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    iters: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run even if the schedule violates the convergence conditions.
    #[arg(long)]
    waive_validation: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.bits {
            cfg.bits = b;
        }
        if let Some(k) = self.iters {
            cfg.iterations = k;
        }
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::read(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        self.apply(&mut cfg);
        Ok(cfg)
    }
}

enum Outcome {
    Ok,
    Rejected,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<Outcome> {
    let cfg = args.overrides.load()?;
    let outcome = match run_experiment(&cfg, args.waive_validation) {
        Err(Error::ScheduleRejected(report)) => {
            eprintln!("schedule rejected; pass --waive-validation to run anyway");
            eprint!("{report}");
            eprintln!("violated: {}", report.failed_names().join(", "));
            return Ok(Outcome::Rejected);
        }
        other => other?,
    };
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    outcome.trajectory.write_csv(&out.join("trajectory.csv"))?;
    write(&out.join("config.txt"), cfg.to_text())?;
    write(
        &out.join("reference.txt"),
        outcome.instance.reference.to_text(),
    )?;
    outcome
        .instance
        .graph
        .write_edge_list(&out.join("graph_edges.txt"))?;
    outcome
        .instance
        .graph
        .write_coords(&out.join("graph_coords.txt"))?;
    outcome.instance.mixing.write_csv(&out.join("mixing.csv"))?;
    let summary = outcome.summary();
    write(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(Outcome::Ok)
}

fn cmd_sweep(args: &RunArgs) -> Result<Outcome> {
    let o = &args.overrides;
    let mut spec = SweepSpec::read(&o.config)
        .with_context(|| format!("reading sweep spec {}", o.config.display()))?;
    o.apply(&mut spec.base);
    let result = sweep(&spec, &args.out, args.waive_validation)?;
    let mut failed = 0;
    for cell in result.failures() {
        failed += 1;
        if let Err(e) = &cell.result {
            eprintln!(
                "cell {} seed {} failed: {e}",
                spec.label(cell.value),
                cell.seed
            );
        }
    }
    println!(
        "{} cells, {} failed; combined table {}, plot {}",
        result.cells.len(),
        failed,
        result.combined_csv.display(),
        result.plot_svg.display()
    );
    for (value, records) in &result.averaged {
        if let Some(last) = records.last() {
            println!(
                "{}: final mean gap_z = {:e}",
                spec.label(*value),
                last.gap_z
            );
        }
    }
    if failed > 0 {
        anyhow::bail!("{failed} sweep cell(s) failed");
    }
    Ok(Outcome::Ok)
}

fn cmd_validate(args: &Overrides) -> Result<Outcome> {
    let cfg = args.load()?;
    let report = validate_experiment(&cfg)?;
    print!("{report}");
    Ok(if report.passed() {
        Outcome::Ok
    } else {
        Outcome::Rejected
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Rejected) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
