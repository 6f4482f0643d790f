//! The quantized two-timescale distributed subgradient iteration.
//!
//! Each round every agent broadcasts one stochastically quantized copy of its
//! iterate. Agent `i` then mixes toward the weighted average of what it heard,
//!
//! ```text
//! v_i = (1 - β_k) x_i + β_k Σ_j a_ij q_j
//! x_i ← P_box[v_i - α_k g_i(x_i)]
//! ```
//!
//! and folds the new iterate into a running weighted time average `z_i` with
//! weights proportional to `(t + 1)^-λγ`.

use std::fmt;

use rayon::prelude::*;

use crate::analysis::{self, ReferenceSolution, RunTrajectory};
use crate::error::{Error, Result};
use crate::network::MixingMatrix;
use crate::objectives::Objective;
use crate::quantization::{Quantize, QuantizerConfig};
use crate::rng::{self, Purpose, Stream};

/// Power-law step sizes `α_k = α0 (k+1)^-λα`, `β_k = β0 (k+1)^-λβ` and
/// time-average weights `(t+1)^-λγ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub alpha0: f64,
    pub lambda_alpha: f64,
    pub beta0: f64,
    pub lambda_beta: f64,
    pub lambda_gamma: f64,
}

impl Schedule {
    pub fn new(
        alpha0: f64,
        lambda_alpha: f64,
        beta0: f64,
        lambda_beta: f64,
        lambda_gamma: f64,
    ) -> Result<Self> {
        let all = [alpha0, lambda_alpha, beta0, lambda_beta, lambda_gamma];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule parameters must be finite: {all:?}"
            )));
        }
        if alpha0 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha0 must be positive, got {alpha0}"
            )));
        }
        if beta0 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "beta0 must be non-negative, got {beta0}"
            )));
        }
        Ok(Schedule {
            alpha0,
            lambda_alpha,
            beta0,
            lambda_beta,
            lambda_gamma,
        })
    }

    /// `α_k = 1/(k+1)`, `β_k = (k+1)^-0.6`, harmonic time-average weights.
    pub fn reference_experiment() -> Self {
        Schedule {
            alpha0: 1.0,
            lambda_alpha: 1.0,
            beta0: 1.0,
            lambda_beta: 0.6,
            lambda_gamma: 1.0,
        }
    }

    pub fn alpha(&self, k: u64) -> f64 {
        self.alpha0 * ((k + 1) as f64).powf(-self.lambda_alpha)
    }

    pub fn beta(&self, k: u64) -> f64 {
        self.beta0 * ((k + 1) as f64).powf(-self.lambda_beta)
    }

    /// Unnormalized time-average weight of iterate `t`.
    pub fn gamma_weight(&self, t: u64) -> f64 {
        ((t + 1) as f64).powf(-self.lambda_gamma)
    }
}

pub fn stepsize_alpha(s: &Schedule, k: u64) -> f64 {
    s.alpha(k)
}

pub fn stepsize_beta(s: &Schedule, k: u64) -> f64 {
    s.beta(k)
}

/// One convergence hypothesis evaluated for a concrete schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub name: &'static str,
    /// The hypothesis in words, e.g. `Σ β_k² < ∞`.
    pub statement: &'static str,
    /// The inequality with this schedule's numbers substituted.
    pub instantiated: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub conditions: Vec<Condition>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Condition> {
        self.conditions.iter().filter(|c| !c.passed)
    }

    pub fn failed_names(&self) -> Vec<&'static str> {
        self.failures().map(|c| c.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.conditions {
            writeln!(
                f,
                "{:<6} {:<38} {:<28} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.statement,
                c.instantiated
            )?;
        }
        Ok(())
    }
}

/// Evaluates the step-size hypotheses of the convergence theory for power-law
/// schedules. Series conditions reduce to exponent inequalities.
pub fn validate_schedule(s: &Schedule, mu: f64, sigma2: f64) -> ValidationReport {
    let (la, lb, lg) = (s.lambda_alpha, s.lambda_beta, s.lambda_gamma);
    let mut conditions = Vec::new();
    let mut push = |name, statement, instantiated: String, passed| {
        conditions.push(Condition {
            name,
            statement,
            instantiated,
            passed,
        })
    };

    push(
        "sum_beta_diverges",
        "Σ β_k = ∞",
        format!("β0 = {} > 0 and λβ = {lb} ≤ 1", s.beta0),
        s.beta0 > 0.0 && lb <= 1.0,
    );
    push(
        "sum_beta_sq_converges",
        "Σ β_k² < ∞",
        format!("λβ = {lb} > 1/2"),
        lb > 0.5,
    );
    push(
        "sum_alpha_sq_over_beta_converges",
        "Σ α_k²/β_k < ∞",
        format!("2λα − λβ = {} > 1", 2.0 * la - lb),
        2.0 * la - lb > 1.0,
    );
    push(
        "sum_alpha_diverges",
        "Σ α_k = ∞",
        format!("λα = {la} ≤ 1"),
        la <= 1.0,
    );
    push(
        "k_beta_diverges",
        "lim k β_k = ∞",
        format!("λβ = {lb} < 1"),
        lb < 1.0,
    );
    push(
        "inv_k_alpha_bounded",
        "lim 1/(k α_k) ≤ C",
        format!("λα = {la} ≤ 1"),
        la <= 1.0,
    );
    push(
        "lambda_alpha_range",
        "1/2 < λα ≤ 1",
        format!("λα = {la}"),
        la > 0.5 && la <= 1.0,
    );
    push(
        "lambda_beta_range",
        "1/2 < λβ < 1",
        format!("λβ = {lb}"),
        lb > 0.5 && lb < 1.0,
    );
    push(
        "two_lambda_beta_exceeds_lambda_alpha",
        "2λβ > λα",
        format!("2λβ = {} > λα = {la}", 2.0 * lb),
        2.0 * lb > la,
    );
    push(
        "lambda_gamma_range",
        "λα ≤ λγ ≤ 1",
        format!("λα = {la} ≤ λγ = {lg} ≤ 1"),
        la <= lg && lg <= 1.0,
    );
    push(
        "spectral_gap_beta0",
        "(1 − σ2) β0 < 1",
        format!(
            "(1 − {sigma2}) × {} = {} < 1",
            s.beta0,
            (1.0 - sigma2) * s.beta0
        ),
        (1.0 - sigma2) * s.beta0 < 1.0,
    );
    push(
        "alpha0_mu",
        "α0 μ < 1",
        format!("{} × {mu} = {} < 1", s.alpha0, s.alpha0 * mu),
        s.alpha0 * mu < 1.0,
    );

    ValidationReport { conditions }
}

/// Per-agent iterate and running time average.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: Vec<f64>,
    /// `Σ_t (t+1)^-λγ x_t`
    pub z_numerator: Vec<f64>,
    /// `Σ_t (t+1)^-λγ`
    pub z_denominator: f64,
    /// Index of the iterate currently held in `x`.
    pub k: u64,
    grad: Vec<f64>,
}

impl AgentState {
    /// State holding `x_0` with the time average already seeded by it.
    pub fn new(x0: Vec<f64>, lambda_gamma: f64) -> Self {
        let d = x0.len();
        let mut s = AgentState {
            x: x0,
            z_numerator: vec![0.0; d],
            z_denominator: 0.0,
            k: 0,
            grad: vec![0.0; d],
        };
        update_time_average(&mut s, lambda_gamma);
        s
    }

    /// `z = numerator / denominator`, a convex combination of past iterates.
    pub fn z(&self) -> Vec<f64> {
        self.z_numerator
            .iter()
            .map(|v| v / self.z_denominator)
            .collect()
    }
}

/// Folds the current iterate `x_k` into the time average with weight
/// `(k+1)^-λγ`. Renormalization is implicit in the numerator/denominator pair.
pub fn update_time_average(state: &mut AgentState, lambda_gamma: f64) {
    let w = ((state.k + 1) as f64).powf(-lambda_gamma);
    for (n, x) in state.z_numerator.iter_mut().zip(&state.x) {
        *n += w * x;
    }
    state.z_denominator += w;
}

/// Everything a run needs besides the reference solution.
pub struct RunConfig<'a, Q = QuantizerConfig> {
    pub objective: &'a dyn Objective,
    pub mixing: &'a MixingMatrix,
    pub quantizer: Q,
    pub schedule: Schedule,
    pub iterations: u64,
    pub seed: u64,
    /// Record metrics every `cadence` iterations (and at the last one).
    pub cadence: u64,
    pub waive_validation: bool,
}

impl<Q: Quantize> RunConfig<'_, Q> {
    fn check_shapes(&self) -> Result<()> {
        let n = self.objective.n_agents();
        if self.mixing.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.mixing.n(),
                context: "mixing matrix size vs number of agents".into(),
            });
        }
        if self.cadence == 0 {
            return Err(Error::InvalidArgument("cadence must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let s = &self.schedule;
        format!(
            "n_agents={} dim={} delta={} alpha0={} lambda_alpha={} beta0={} lambda_beta={} lambda_gamma={} iterations={} cadence={} seed={}",
            self.objective.n_agents(),
            self.objective.dim(),
            self.quantizer.delta(),
            s.alpha0,
            s.lambda_alpha,
            s.beta0,
            s.lambda_beta,
            s.lambda_gamma,
            self.iterations,
            self.cadence,
            self.seed
        )
    }
}

/// Uniform draws from the feasible box, one independent stream per agent.
pub fn initial_states(objective: &dyn Objective, seed: u64, lambda_gamma: f64) -> Vec<AgentState> {
    use rand::Rng;
    let bx = objective.feasible_box();
    rng::agent_streams(seed, Purpose::Initialization, objective.n_agents())
        .into_iter()
        .map(|mut r| {
            let x0 = (0..objective.dim())
                .map(|_| r.random_range(bx.lo..=bx.hi))
                .collect();
            AgentState::new(x0, lambda_gamma)
        })
        .collect()
}

/// Advances every agent from iterate `k` to `k + 1`.
///
/// Each agent quantizes its iterate exactly once; all neighbors read that same
/// broadcast. Agents then update in parallel against the immutable broadcast
/// snapshot, each drawing only from its own stream.
pub fn gdsrq_step<Q: Quantize>(
    states: &mut [AgentState],
    cfg: &RunConfig<'_, Q>,
    k: u64,
    streams: &mut [Stream],
) -> Result<()> {
    let n = cfg.objective.n_agents();
    let d = cfg.objective.dim();
    if states.len() != n || streams.len() != n || cfg.mixing.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: states.len().min(streams.len()).min(cfg.mixing.n()),
            context: "agents, streams and mixing matrix must agree".into(),
        });
    }
    if let Some(bad) = states.iter().find(|s| s.k != k) {
        return Err(Error::InvalidArgument(format!(
            "step {k} requested but an agent holds iterate {}",
            bad.k
        )));
    }
    if let Some(bad) = states.iter().find(|s| s.x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.x.len(),
            context: "agent iterate".into(),
        });
    }

    let mut broadcast = vec![0.0; n * d];
    broadcast
        .par_chunks_mut(d)
        .zip(states.par_iter())
        .zip(streams.par_iter_mut())
        .try_for_each(|((q, s), r)| cfg.quantizer.quantize_into(&s.x, q, r))?;

    let alpha = cfg.schedule.alpha(k);
    let beta = cfg.schedule.beta(k);
    let keep = 1.0 - beta;
    let bx = cfg.objective.feasible_box();
    let broadcast = &broadcast;

    states
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(i, s)| -> Result<()> {
            cfg.objective.local_subgradient(i, &s.x, &mut s.grad);
            let row = cfg.mixing.row(i);
            for c in 0..d {
                let mut heard = 0.0;
                for &(j, a) in row {
                    heard += a * broadcast[j * d + c];
                }
                // (1-β)x + βs written so that β = 1 gives s and x = s gives x exactly
                let v = heard + keep * (s.x[c] - heard);
                let y = v - alpha * s.grad[c];
                if !y.is_finite() {
                    return Err(Error::NonFinite {
                        value: y,
                        context: format!("agent {i}, coordinate {c}, iteration {k}"),
                    });
                }
                s.x[c] = y;
            }
            bx.project_in_place(&mut s.x);
            s.k = k + 1;
            Ok(())
        })
}

/// Runs `cfg.iterations` rounds from seeded initial iterates, recording
/// metrics against `reference` at `k = 0`, every `cadence` rounds and at the
/// final round. The result depends only on the configuration and seed, not on
/// the rayon thread count.
pub fn run<Q: Quantize>(
    cfg: &RunConfig<'_, Q>,
    reference: &ReferenceSolution,
) -> Result<RunTrajectory> {
    cfg.check_shapes()?;
    if !cfg.waive_validation {
        let report = validate_schedule(
            &cfg.schedule,
            cfg.objective.convexity().mu(),
            cfg.mixing.sigma2(),
        );
        if !report.passed() {
            return Err(Error::ScheduleRejected(Box::new(report)));
        }
    }
    if reference.x_star.len() != cfg.objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: cfg.objective.dim(),
            got: reference.x_star.len(),
            context: "reference solution".into(),
        });
    }

    let lambda_gamma = cfg.schedule.lambda_gamma;
    let mut states = initial_states(cfg.objective, cfg.seed, lambda_gamma);
    let mut streams = rng::agent_streams(cfg.seed, Purpose::Quantization, states.len());

    let mut records = vec![analysis::record(0, &states, cfg.objective, reference)];
    for k in 0..cfg.iterations {
        gdsrq_step(&mut states, cfg, k, &mut streams)?;
        states
            .par_iter_mut()
            .for_each(|s| update_time_average(s, lambda_gamma));
        let done = k + 1;
        if done % cfg.cadence == 0 || done == cfg.iterations {
            records.push(analysis::record(done, &states, cfg.objective, reference));
        }
    }
    Ok(RunTrajectory {
        records,
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{lazy_metropolis, Graph};
    use crate::objectives::{BoxSet, CenteredQuadratic};

    #[test]
    fn stepsize_values() {
        let s = Schedule::new(1.0, 1.0, 1.0, 0.6, 1.0).unwrap();
        assert_eq!(stepsize_alpha(&s, 0), 1.0);
        assert_eq!(stepsize_beta(&s, 0), 1.0);
        assert!((stepsize_beta(&s, 1) - 0.659_754).abs() < 1e-6);
        for k in 0..100u64 {
            assert_eq!(s.alpha(k), 1.0 / (k + 1) as f64);
            assert!(s.alpha(k + 1) < s.alpha(k));
            assert!(s.beta(k + 1) < s.beta(k));
        }
    }

    #[test]
    fn schedule_rejects_bad_prefactors() {
        assert!(Schedule::new(0.0, 1.0, 1.0, 0.6, 1.0).is_err());
        assert!(Schedule::new(1.0, 1.0, -0.1, 0.6, 1.0).is_err());
        assert!(Schedule::new(1.0, f64::NAN, 1.0, 0.6, 1.0).is_err());
    }

    #[test]
    fn reference_schedule_passes_everything() {
        let r = validate_schedule(&Schedule::reference_experiment(), 0.0, 0.8);
        assert!(r.passed(), "{r}");
        assert_eq!(r.conditions.len(), 12);
    }

    #[test]
    fn half_lambda_beta_is_rejected() {
        let s = Schedule::new(1.0, 1.0, 1.0, 0.5, 1.0).unwrap();
        let r = validate_schedule(&s, 0.0, 0.8);
        assert!(!r.passed());
        assert!(r.failed_names().contains(&"lambda_beta_range"));
        assert!(r.failed_names().contains(&"sum_beta_sq_converges"));
    }

    #[test]
    fn two_violations_are_both_named() {
        let s = Schedule::new(1.0, 0.9, 1.0, 0.4, 1.0).unwrap();
        let r = validate_schedule(&s, 0.0, 0.8);
        let failed = r.failed_names();
        assert!(failed.contains(&"lambda_beta_range"));
        assert!(failed.contains(&"two_lambda_beta_exceeds_lambda_alpha"));
        let c = r.get("two_lambda_beta_exceeds_lambda_alpha").unwrap();
        assert!(c.instantiated.contains("0.8"), "{}", c.instantiated);
    }

    #[test]
    fn scalar_conditions_print_their_numbers() {
        let s = Schedule::new(2.0, 1.0, 3.0, 0.6, 1.0).unwrap();
        let r = validate_schedule(&s, 0.75, 0.5);
        let gap = r.get("spectral_gap_beta0").unwrap();
        assert!(!gap.passed);
        assert!(gap.instantiated.contains("0.5") && gap.instantiated.contains('3'));
        assert!(!r.get("alpha0_mu").unwrap().passed);
    }

    #[test]
    fn time_average_first_and_second_terms() {
        let mut s = AgentState::new(vec![3.0, -1.0], 1.0);
        assert_eq!(s.z(), vec![3.0, -1.0]);
        s.x = vec![0.0, 2.0];
        s.k = 1;
        update_time_average(&mut s, 1.0);
        // (2 x0 + x1) / 3
        let z = s.z();
        assert!((z[0] - 2.0).abs() < 1e-15);
        assert!((z[1] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn time_average_of_constant_trajectory() {
        let c = vec![0.25, -0.5, 0.125];
        let mut s = AgentState::new(c.clone(), 0.7);
        for k in 1..200 {
            s.k = k;
            update_time_average(&mut s, 0.7);
            for (zi, ci) in s.z().iter().zip(&c) {
                assert!((zi - ci).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn step_rejects_mismatched_counter() {
        let f = CenteredQuadratic::new(vec![vec![0.0]; 2], BoxSet::symmetric_unit()).unwrap();
        let m = lazy_metropolis(&Graph::path(2)).unwrap();
        let cfg = RunConfig {
            objective: &f,
            mixing: &m,
            quantizer: QuantizerConfig::passthrough(),
            schedule: Schedule::reference_experiment(),
            iterations: 1,
            seed: 0,
            cadence: 1,
            waive_validation: false,
        };
        let mut states = initial_states(&f, 0, 1.0);
        let mut streams = rng::agent_streams(0, Purpose::Quantization, 2);
        assert!(gdsrq_step(&mut states, &cfg, 3, &mut streams).is_err());
        assert!(gdsrq_step(&mut states, &cfg, 0, &mut streams[..1]).is_err());
        gdsrq_step(&mut states, &cfg, 0, &mut streams).unwrap();
        assert!(states.iter().all(|s| s.k == 1));
    }
}
