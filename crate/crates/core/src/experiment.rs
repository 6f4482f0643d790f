//! Experiment plumbing: the `key = value` run configuration, building a problem
//! instance from it, seed ensembles, parameter sweeps and their artifacts.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::analysis::{
    self, fit_empirical_rate, predicted_rate, reference_optimum, weight_condition_check,
    ReferenceSolution, RunTrajectory, TrajectoryRecord, WeightConditionReport,
};
use crate::error::{Error, Result};
use crate::gdsrq::{run, validate_schedule, RunConfig, Schedule, ValidationReport};
use crate::network::{generate_geometric_graph, lazy_metropolis, Graph, MixingMatrix};
use crate::objectives::{
    generate_synthetic_dataset, linear_regression_objective, BoxSet, CenteredQuadratic, Objective,
};
use crate::quantization::QuantizerConfig;
use crate::rng::{self, Purpose};

/// Solver tolerance for the reference optimum.
pub const REFERENCE_TOL: f64 = 1e-10;

/// Horizons at which the weight conditions are materialized.
pub const WEIGHT_HORIZONS: [u64; 3] = [100, 1_000, 10_000];

pub const DEFAULT_CADENCE: u64 = 10;

/// Tail share of the records used for slope fits.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Squared-residual regression on uniform synthetic data.
    Regression,
    /// `‖x − c_i‖²` with uniform centers in the box.
    Centers,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(ObjectiveKind::Regression),
            "centers" => Ok(ObjectiveKind::Centers),
            other => Err(Error::Config(format!(
                "objective: expected `regression` or `centers`, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Regression => "regression",
            ObjectiveKind::Centers => "centers",
        })
    }
}

/// Plain-text run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_agents: usize,
    pub dim: usize,
    pub radius: f64,
    /// Quantizer bit width; 0 selects the lossless passthrough.
    pub bits: u8,
    pub alpha0: f64,
    pub lambda_alpha: f64,
    pub beta0: f64,
    pub lambda_beta: f64,
    pub lambda_gamma: f64,
    pub iterations: u64,
    pub seed: u64,
    pub cadence: u64,
    pub objective: ObjectiveKind,
}

pub const CONFIG_KEYS: [&str; 13] = [
    "n_agents",
    "dim",
    "radius",
    "bits",
    "alpha0",
    "lambda_alpha",
    "beta0",
    "lambda_beta",
    "lambda_gamma",
    "iterations",
    "seed",
    "cadence",
    "objective",
];

impl ExperimentConfig {
    /// Fifty agents on a radius-0.3 geometric graph solving a 10-dimensional
    /// regression with `α_k = 1/(k+1)`, `β_k = (k+1)^-0.6`.
    pub fn reference_experiment(bits: u8, seed: u64) -> Self {
        ExperimentConfig {
            n_agents: 50,
            dim: 10,
            radius: 0.3,
            bits,
            alpha0: 1.0,
            lambda_alpha: 1.0,
            beta0: 1.0,
            lambda_beta: 0.6,
            lambda_gamma: 1.0,
            iterations: 10_000,
            seed,
            cadence: DEFAULT_CADENCE,
            objective: ObjectiveKind::Regression,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(
            self.alpha0,
            self.lambda_alpha,
            self.beta0,
            self.lambda_beta,
            self.lambda_gamma,
        )
    }

    pub fn quantizer(&self) -> Result<QuantizerConfig> {
        QuantizerConfig::from_bits(self.bits)
    }

    /// Parses `key = value` lines; `#` starts a comment. Every key except
    /// `cadence` is required; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        Self::from_map(&kv)
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let unknown: Vec<&str> = kv
            .keys()
            .map(String::as_str)
            .filter(|k| !CONFIG_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        let missing: Vec<&str> = CONFIG_KEYS
            .iter()
            .copied()
            .filter(|k| *k != "cadence" && !kv.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing keys: {}",
                missing.join(", ")
            )));
        }
        let mut invalid = Vec::new();
        fn get<T: FromStr>(
            kv: &BTreeMap<String, String>,
            key: &'static str,
            invalid: &mut Vec<String>,
        ) -> Option<T> {
            let raw = kv.get(key)?;
            match raw.parse::<T>() {
                Ok(v) => Some(v),
                Err(_) => {
                    invalid.push(format!("{key} = {raw:?}"));
                    None
                }
            }
        }
        let cfg = (|| {
            Some(ExperimentConfig {
                n_agents: get(kv, "n_agents", &mut invalid)?,
                dim: get(kv, "dim", &mut invalid)?,
                radius: get(kv, "radius", &mut invalid)?,
                bits: get(kv, "bits", &mut invalid)?,
                alpha0: get(kv, "alpha0", &mut invalid)?,
                lambda_alpha: get(kv, "lambda_alpha", &mut invalid)?,
                beta0: get(kv, "beta0", &mut invalid)?,
                lambda_beta: get(kv, "lambda_beta", &mut invalid)?,
                lambda_gamma: get(kv, "lambda_gamma", &mut invalid)?,
                iterations: get(kv, "iterations", &mut invalid)?,
                seed: get(kv, "seed", &mut invalid)?,
                cadence: if kv.contains_key("cadence") {
                    get(kv, "cadence", &mut invalid)?
                } else {
                    DEFAULT_CADENCE
                },
                objective: get(kv, "objective", &mut invalid)?,
            })
        })();
        match cfg {
            Some(cfg) => {
                cfg.check()?;
                Ok(cfg)
            }
            None => Err(Error::Config(format!(
                "invalid values: {}",
                invalid.join(", ")
            ))),
        }
    }

    fn check(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_agents == 0 {
            bad.push("n_agents must be at least 1");
        }
        if self.dim == 0 {
            bad.push("dim must be at least 1");
        }
        if self.radius.is_nan() || self.radius <= 0.0 {
            bad.push("radius must be positive");
        }
        if self.cadence == 0 {
            bad.push("cadence must be at least 1");
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        self.schedule()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.quantizer()
            .map_err(|e| Error::Config(format!("bits: {e}")))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_agents = {}\ndim = {}\nradius = {}\nbits = {}\nalpha0 = {}\nlambda_alpha = {}\nbeta0 = {}\nlambda_beta = {}\nlambda_gamma = {}\niterations = {}\nseed = {}\ncadence = {}\nobjective = {}\n",
            self.n_agents,
            self.dim,
            self.radius,
            self.bits,
            self.alpha0,
            self.lambda_alpha,
            self.beta0,
            self.lambda_beta,
            self.lambda_gamma,
            self.iterations,
            self.seed,
            self.cadence,
            self.objective
        )
    }
}

fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            ))
        })?;
        let key = k.trim().to_owned();
        if kv.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
    }
    Ok(kv)
}

/// The fixed problem a seed induces: graph, weights, losses and optimum.
pub struct Instance {
    pub graph: Graph,
    pub mixing: MixingMatrix,
    pub objective: Box<dyn Objective>,
    pub reference: ReferenceSolution,
}

impl Instance {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let graph = generate_geometric_graph(cfg.n_agents, cfg.radius, seed)?;
        let mixing = lazy_metropolis(&graph)?;
        let objective: Box<dyn Objective> = match cfg.objective {
            ObjectiveKind::Regression => Box::new(linear_regression_objective(
                generate_synthetic_dataset(cfg.n_agents, cfg.dim, seed)?,
            )?),
            ObjectiveKind::Centers => {
                let bx = BoxSet::symmetric_unit();
                let mut r = rng::stream(seed, Purpose::Dataset, 0);
                let centers = (0..cfg.n_agents)
                    .map(|_| {
                        (0..cfg.dim)
                            .map(|_| r.random_range(bx.lo..=bx.hi))
                            .collect()
                    })
                    .collect();
                Box::new(CenteredQuadratic::new(centers, bx)?)
            }
        };
        let reference = reference_optimum(objective.as_ref(), REFERENCE_TOL)?;
        Ok(Instance {
            graph,
            mixing,
            objective,
            reference,
        })
    }

    pub fn mu(&self) -> f64 {
        self.objective.convexity().mu()
    }
}

/// One executed run with everything needed for its summary.
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub instance: Instance,
    pub validation: ValidationReport,
    pub trajectory: RunTrajectory,
}

impl RunOutcome {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let t = &self.trajectory;
        let _ = writeln!(s, "config: {}", t.fingerprint);
        let _ = writeln!(
            s,
            "graph: {} nodes, {} edges, {} generation attempts, sigma2 = {}",
            self.instance.graph.n(),
            self.instance.graph.edge_count(),
            self.instance.graph.attempts(),
            self.instance.mixing.sigma2()
        );
        let _ = writeln!(
            s,
            "reference: f* = {}, mu = {}, solver iterations = {}",
            self.instance.reference.f_star,
            self.instance.mu(),
            self.instance.reference.iterations
        );
        if let Some(last) = t.last() {
            let _ = writeln!(
                s,
                "final k = {}: r_k = {:e}, consensus_sq = {:e}, gap_z = {:e}, gap_xbar = {:e}",
                last.k, last.r_k, last.consensus_sq, last.gap_z, last.gap_xbar
            );
        }
        let series: Vec<(u64, f64)> = t.records.iter().map(|r| (r.k, r.gap_z)).collect();
        match fit_empirical_rate(&series, DEFAULT_TAIL_FRACTION) {
            Ok(fit) => {
                let _ = writeln!(
                    s,
                    "fitted tail slope of gap_z: {:.4} ({} points, {} non-positive dropped)",
                    fit.slope, fit.points, fit.dropped_nonpositive
                );
            }
            Err(e) => {
                let _ = writeln!(s, "fitted tail slope of gap_z: unavailable ({e})");
            }
        }
        let _ = writeln!(
            s,
            "predicted rate exponent: {}",
            predicted_rate(self.config.lambda_alpha, self.config.lambda_beta)
        );
        let negative = t.negative_gaps(analysis::GAP_TOLERANCE);
        if !negative.is_empty() {
            let _ = writeln!(
                s,
                "warning: negative gaps beyond tolerance at k = {negative:?}"
            );
        }
        let _ = writeln!(
            s,
            "schedule validation: {}",
            if self.validation.passed() {
                "all conditions pass".to_owned()
            } else {
                format!("FAILED ({})", self.validation.failed_names().join(", "))
            }
        );
        s
    }
}

/// Builds the instance for `cfg.seed`, validates the schedule and runs.
pub fn run_experiment(cfg: &ExperimentConfig, waive_validation: bool) -> Result<RunOutcome> {
    let instance = Instance::build(cfg, cfg.seed)?;
    let schedule = cfg.schedule()?;
    let validation = validate_schedule(&schedule, instance.mu(), instance.mixing.sigma2());
    if !validation.passed() && !waive_validation {
        return Err(Error::ScheduleRejected(Box::new(validation)));
    }
    let run_cfg = RunConfig {
        objective: instance.objective.as_ref(),
        mixing: &instance.mixing,
        quantizer: cfg.quantizer()?,
        schedule,
        iterations: cfg.iterations,
        seed: cfg.seed,
        cadence: cfg.cadence,
        waive_validation: true,
    };
    let trajectory = run(&run_cfg, &instance.reference)?;
    Ok(RunOutcome {
        config: cfg.clone(),
        instance,
        validation,
        trajectory,
    })
}

/// Schedule conditions plus weight conditions for the configured instance.
pub struct ValidationOutcome {
    pub sigma2: f64,
    pub mu: f64,
    pub schedule: ValidationReport,
    pub weights: WeightConditionReport,
}

impl ValidationOutcome {
    pub fn passed(&self) -> bool {
        self.schedule.passed() && self.weights.passed()
    }
}

impl fmt::Display for ValidationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sigma2 = {}, mu = {}", self.sigma2, self.mu)?;
        write!(f, "{}", self.schedule)?;
        write!(f, "{}", self.weights)?;
        writeln!(
            f,
            "overall: {}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn validate_experiment(cfg: &ExperimentConfig) -> Result<ValidationOutcome> {
    let instance = Instance::build(cfg, cfg.seed)?;
    let schedule = cfg.schedule()?;
    let mu = instance.mu();
    Ok(ValidationOutcome {
        sigma2: instance.mixing.sigma2(),
        mu,
        schedule: validate_schedule(&schedule, mu, instance.mixing.sigma2()),
        weights: weight_condition_check(&schedule, mu, &WEIGHT_HORIZONS),
    })
}

/// Field-wise mean of trajectories recorded at identical iterations.
pub fn average_trajectories(runs: &[RunTrajectory]) -> Result<Vec<TrajectoryRecord>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories to average".into()))?;
    let n = runs.len() as f64;
    let mut out = first.records.clone();
    for run in &runs[1..] {
        if run.records.len() != out.len() || run.records.iter().zip(&out).any(|(a, b)| a.k != b.k) {
            return Err(Error::InvalidArgument(
                "trajectories recorded at different iterations".into(),
            ));
        }
        for (o, r) in out.iter_mut().zip(&run.records) {
            o.r_k += r.r_k;
            o.consensus_sq += r.consensus_sq;
            o.gap_z += r.gap_z;
            o.gap_xbar += r.gap_xbar;
        }
    }
    for o in &mut out {
        o.r_k /= n;
        o.consensus_sq /= n;
        o.gap_z /= n;
        o.gap_xbar /= n;
    }
    Ok(out)
}

/// Runs `cfg` once per seed (in parallel) and averages the trajectories.
pub fn ensemble(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    waive_validation: bool,
) -> Result<Vec<TrajectoryRecord>> {
    let runs: Vec<RunTrajectory> = seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            run_experiment(&c, waive_validation).map(|o| o.trajectory)
        })
        .collect::<Result<_>>()?;
    average_trajectories(&runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweptParameter {
    Bits,
    LambdaAlpha,
    LambdaBeta,
    /// Each value is a base seed.
    Seeds,
}

impl FromStr for SweptParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bits" => Ok(SweptParameter::Bits),
            "lambda_alpha" => Ok(SweptParameter::LambdaAlpha),
            "lambda_beta" => Ok(SweptParameter::LambdaBeta),
            "seeds" => Ok(SweptParameter::Seeds),
            other => Err(Error::Config(format!(
                "sweep: expected bits, lambda_alpha, lambda_beta or seeds, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for SweptParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweptParameter::Bits => "bits",
            SweptParameter::LambdaAlpha => "lambda_alpha",
            SweptParameter::LambdaBeta => "lambda_beta",
            SweptParameter::Seeds => "seeds",
        })
    }
}

/// A base configuration, one swept parameter and a seed count per value.
///
/// File format: the run configuration keys plus `sweep = <parameter>`,
/// `values = v1, v2, ...` and `seeds_per_cell = <count>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub parameter: SweptParameter,
    pub values: Vec<f64>,
    pub seeds_per_cell: u64,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_key_values(text)?;
        let parameter: SweptParameter = kv
            .remove("sweep")
            .ok_or_else(|| Error::Config("missing keys: sweep".into()))?
            .parse()?;
        let values = kv
            .remove("values")
            .ok_or_else(|| Error::Config("missing keys: values".into()))?
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("values: bad entry {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds_per_cell = match kv.remove("seeds_per_cell") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid values: seeds_per_cell = {v:?}")))?,
            None => 1,
        };
        let base = ExperimentConfig::from_map(&kv)?;
        let spec = SweepSpec {
            base,
            parameter,
            values,
            seeds_per_cell,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("values: list is empty".into()));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::Config("seeds_per_cell must be at least 1".into()));
        }
        for &v in &self.values {
            self.cell_config(v, 0)?;
        }
        Ok(())
    }

    /// Configuration of the `index`-th seed in the cell for `value`.
    pub fn cell_config(&self, value: f64, index: u64) -> Result<ExperimentConfig> {
        let mut c = self.base.clone();
        let integral = |what: &str| -> Result<u64> {
            if value >= 0.0 && value.fract() == 0.0 && value <= u64::MAX as f64 {
                Ok(value as u64)
            } else {
                Err(Error::Config(format!(
                    "{what} value {value} is not a non-negative integer"
                )))
            }
        };
        match self.parameter {
            SweptParameter::Bits => {
                let b = integral("bits")?;
                c.bits = u8::try_from(b)
                    .map_err(|_| Error::Config(format!("bits value {b} too large")))?;
            }
            SweptParameter::LambdaAlpha => c.lambda_alpha = value,
            SweptParameter::LambdaBeta => c.lambda_beta = value,
            SweptParameter::Seeds => c.seed = integral("seed")?,
        }
        c.seed = c.seed.wrapping_add(index);
        c.check()?;
        Ok(c)
    }

    pub fn label(&self, value: f64) -> String {
        format!("{}={}", self.parameter, value)
    }
}

/// Result of one `(value, seed)` cell.
pub struct CellOutcome {
    pub value: f64,
    pub seed: u64,
    pub trajectory_path: PathBuf,
    pub result: Result<RunTrajectory>,
}

pub struct SweepOutcome {
    pub cells: Vec<CellOutcome>,
    /// Seed-averaged trajectory per swept value, for values whose cells all succeeded.
    pub averaged: Vec<(f64, Vec<TrajectoryRecord>)>,
    pub combined_csv: PathBuf,
    pub plot_svg: PathBuf,
}

impl SweepOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &CellOutcome> {
        self.cells.iter().filter(|c| c.result.is_err())
    }
}

/// Runs every cell of `spec`, writing per-cell trajectory CSVs under
/// `out/cells/`, then the seed-averaged `gap_z` table and its plot.
/// Failed cells are recorded and the sweep carries on.
pub fn sweep(spec: &SweepSpec, out: &Path, waive_validation: bool) -> Result<SweepOutcome> {
    let cells_dir = out.join("cells");
    std::fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;

    let jobs: Vec<(f64, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.seeds_per_cell).map(move |i| (v, i)))
        .collect();
    let cells: Vec<CellOutcome> = jobs
        .par_iter()
        .map(|&(value, index)| {
            let cfg = spec.cell_config(value, index);
            let seed = cfg.as_ref().map_or(0, |c| c.seed);
            let dir = cells_dir.join(spec.label(value));
            let trajectory_path = dir.join(format!("seed_{seed}.csv"));
            let result = cfg.and_then(|cfg| {
                let outcome = run_experiment(&cfg, waive_validation)?;
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                outcome.trajectory.write_csv(&trajectory_path)?;
                Ok(outcome.trajectory)
            });
            CellOutcome {
                value,
                seed,
                trajectory_path,
                result,
            }
        })
        .collect();

    let mut averaged = Vec::new();
    for &value in &spec.values {
        let runs: Option<Vec<RunTrajectory>> = cells
            .iter()
            .filter(|c| c.value == value)
            .map(|c| c.result.as_ref().ok().cloned())
            .collect();
        if let Some(runs) = runs {
            averaged.push((value, average_trajectories(&runs)?));
        }
    }

    let combined_csv = out.join("combined.csv");
    let series: Vec<LabeledSeries> = averaged
        .iter()
        .map(|(v, recs)| {
            (
                spec.label(*v),
                recs.iter().map(|r| (r.k, r.gap_z)).collect(),
            )
        })
        .collect();
    write_combined_csv(&combined_csv, &series)?;
    let plot_svg = out.join("gap_z.svg");
    let svg = svg_line_chart(
        &series,
        &format!("seed-averaged f(z) − f* by {}", spec.parameter),
        "iteration k",
        "f(z_k) − f*",
    );
    std::fs::write(&plot_svg, svg).map_err(|e| Error::io(&plot_svg, e))?;

    Ok(SweepOutcome {
        cells,
        averaged,
        combined_csv,
        plot_svg,
    })
}

/// CSV with a `k` column then one column per labeled series.
pub fn combined_csv_text(series: &[LabeledSeries]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_owned()];
    header.extend(series.iter().map(|(l, _)| l.clone()));
    w.write_record(&header)?;
    let rows = series.first().map_or(0, |(_, s)| s.len());
    for i in 0..rows {
        let k = series[0].1[i].0;
        let mut rec = vec![k.to_string()];
        for (label, s) in series {
            match s.get(i) {
                Some(&(kk, v)) if kk == k => rec.push(v.to_string()),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "series {label} is not aligned with the others at row {i}"
                    )))
                }
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_combined_csv(path: &Path, series: &[LabeledSeries]) -> Result<()> {
    std::fs::write(path, combined_csv_text(series)?).map_err(|e| Error::io(path, e))
}

/// Inverse of [`combined_csv_text`].
pub fn read_combined_csv(text: &str) -> Result<Vec<LabeledSeries>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("k") {
        return Err(Error::Config(
            "combined CSV must start with a k column".into(),
        ));
    }
    let mut series: Vec<LabeledSeries> = header[1..]
        .iter()
        .map(|h| (h.clone(), Vec::new()))
        .collect();
    for rec in r.records() {
        let rec = rec?;
        let bad = |s: &str| Error::Config(format!("combined CSV: bad number {s:?}"));
        let k: u64 = rec[0].parse().map_err(|_| bad(&rec[0]))?;
        for (i, (_, s)) in series.iter_mut().enumerate() {
            let v: f64 = rec[i + 1].parse().map_err(|_| bad(&rec[i + 1]))?;
            s.push((k, v));
        }
    }
    Ok(series)
}

/// Labeled `(k, value)` series, as stored in the combined CSV.
pub type LabeledSeries = (String, Vec<(u64, f64)>);

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Static SVG line chart with a log-scaled y axis. Non-positive values are
/// left out. Output depends only on the inputs.
pub fn svg_line_chart(
    series: &[LabeledSeries],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let (w, h) = (720.0, 460.0);
    let (left, right, top, bottom) = (80.0, 170.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let points = series
        .iter()
        .flat_map(|(_, s)| s.iter())
        .filter(|(_, v)| *v > 0.0);
    let (mut kmax, mut ymin, mut ymax) = (1u64, f64::INFINITY, f64::NEG_INFINITY);
    for &(k, v) in points {
        kmax = kmax.max(k);
        ymin = ymin.min(v);
        ymax = ymax.max(v);
    }
    if !ymin.is_finite() {
        (ymin, ymax) = (0.1, 1.0);
    }
    let (lo, mut hi) = (ymin.log10().floor(), ymax.log10().ceil());
    if hi <= lo {
        hi = lo + 1.0;
    }
    let sx = |k: u64| left + pw * k as f64 / kmax as f64;
    let sy = |v: f64| top + ph * (hi - v.log10()) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    for e in (lo as i32)..=(hi as i32) {
        let y = sy(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.1}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    for i in 0..=5u64 {
        let k = kmax * i / 5;
        let x = sx(k);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{k}</text>"##,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (label, data)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = data
            .iter()
            .filter(|(_, v)| *v > 0.0 && v.is_finite())
            .map(|&(k, v)| format!("{:.2},{:.2}", sx(k), sy(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_text() -> String {
        ExperimentConfig::reference_experiment(4, 3).to_text()
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ExperimentConfig::reference_experiment(4, 3);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_reports_missing_keys_by_name() {
        let text: String = sample_text()
            .lines()
            .filter(|l| !l.starts_with("beta0") && !l.starts_with("seed"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("beta0") && err.contains("seed"), "{err}");
    }

    #[test]
    fn config_reports_invalid_and_unknown_keys() {
        let bad = sample_text().replace("radius = 0.3", "radius = wide");
        let err = ExperimentConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("radius"), "{err}");
        let extra = format!("{}colour = blue\n", sample_text());
        let err = ExperimentConfig::parse(&extra).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn cadence_defaults_and_comments_are_ignored() {
        let text: String = sample_text()
            .lines()
            .filter(|l| !l.starts_with("cadence"))
            .map(|l| format!("{l}   # trailing comment\n"))
            .collect();
        let cfg = ExperimentConfig::parse(&format!("# header\n\n{text}")).unwrap();
        assert_eq!(cfg.cadence, DEFAULT_CADENCE);
    }

    #[test]
    fn sweep_spec_parsing_and_cells() {
        let text = format!(
            "{}sweep = bits\nvalues = 2, 4,6\nseeds_per_cell = 3\n",
            sample_text()
        );
        let spec = SweepSpec::parse(&text).unwrap();
        assert_eq!(spec.values, vec![2.0, 4.0, 6.0]);
        let c = spec.cell_config(6.0, 2).unwrap();
        assert_eq!((c.bits, c.seed), (6, 5));
        assert_eq!(spec.label(6.0), "bits=6");
        let bad = format!("{}sweep = bits\nvalues = 2.5\n", sample_text());
        assert!(SweepSpec::parse(&bad).is_err());
        let empty = format!("{}sweep = bits\nvalues =\n", sample_text());
        assert!(SweepSpec::parse(&empty).is_err());
    }

    #[test]
    fn combined_csv_round_trip() {
        let series = vec![
            ("bits=2".to_owned(), vec![(0, 1.5), (10, 0.25), (20, 1e-7)]),
            (
                "bits=8".to_owned(),
                vec![(0, 1.25), (10, 0.125), (20, 3.3e-9)],
            ),
        ];
        let text = combined_csv_text(&series).unwrap();
        assert!(text.starts_with("k,bits=2,bits=8\n"));
        assert_eq!(read_combined_csv(&text).unwrap(), series);
    }

    #[test]
    fn svg_is_deterministic_and_has_one_line_per_series() {
        let series = vec![
            ("a".to_owned(), vec![(0, 1.0), (10, 0.1), (20, 0.0)]),
            ("b<c".to_owned(), vec![(0, 2.0), (10, 0.3), (20, 0.05)]),
        ];
        let one = svg_line_chart(&series, "t", "x", "y");
        assert_eq!(one, svg_line_chart(&series, "t", "x", "y"));
        assert_eq!(one.matches("<polyline").count(), 2);
        assert!(one.contains("b&lt;c"));
    }

    #[test]
    fn averaging_requires_aligned_records() {
        let rec = |k, v| TrajectoryRecord {
            k,
            r_k: v,
            consensus_sq: v,
            gap_z: v,
            gap_xbar: v,
        };
        let a = RunTrajectory {
            records: vec![rec(0, 1.0), rec(10, 3.0)],
            fingerprint: String::new(),
            seed: 0,
        };
        let mut b = a.clone();
        b.records[1].gap_z = 5.0;
        let avg = average_trajectories(&[a.clone(), b]).unwrap();
        assert_eq!(avg[1].gap_z, 4.0);
        let mut c = a.clone();
        c.records[1].k = 11;
        assert!(average_trajectories(&[a, c]).is_err());
        assert!(average_trajectories(&[]).is_err());
    }
}
