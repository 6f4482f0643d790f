//! Metrics recorded along a run, the centralized reference optimum, and the
//! numerical checks that accompany the convergence theory.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gdsrq::{AgentState, Schedule};
use crate::objectives::{BoxSet, Objective};

pub const TRAJECTORY_HEADER: &str = "k,r_k,consensus_sq,gap_z,gap_xbar";

/// Negative optimality gaps down to this size are attributed to the
/// reference solver's own tolerance.
pub const GAP_TOLERANCE: f64 = 1e-9;

/// Metrics at one recorded iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub k: u64,
    /// `‖x̄_k − x*‖²`
    pub r_k: f64,
    /// `‖Y_k‖²`, the squared distance of the iterates from their average.
    pub consensus_sq: f64,
    /// Mean over agents of `f(z_i,k) − f*`.
    pub gap_z: f64,
    /// `f(x̄_k) − f*`
    pub gap_xbar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrajectory {
    pub records: Vec<TrajectoryRecord>,
    pub fingerprint: String,
    pub seed: u64,
}

impl RunTrajectory {
    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    pub fn at(&self, k: u64) -> Option<&TrajectoryRecord> {
        self.records.iter().find(|r| r.k == k)
    }

    /// Records whose `gap_z` or `gap_xbar` dips below `-tol`.
    pub fn negative_gaps(&self, tol: f64) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.gap_z < -tol || r.gap_xbar < -tol)
            .map(|r| r.k)
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        records_to_csv(&self.records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

pub fn records_to_csv(records: &[TrajectoryRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(TRAJECTORY_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != TRAJECTORY_HEADER {
        return Err(Error::Config(format!(
            "unexpected trajectory header {:?}, want {TRAJECTORY_HEADER:?}",
            header.join(",")
        )));
    }
    let records: Vec<TrajectoryRecord> = r.deserialize().collect::<Result<_, _>>()?;
    if records.windows(2).any(|w| w[1].k <= w[0].k) {
        return Err(Error::Config(
            "trajectory records must be strictly increasing in k".into(),
        ));
    }
    Ok(records)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text)
}

/// Network-average iterate.
pub fn mean_iterate<V: AsRef<[f64]>>(rows: &[V]) -> Vec<f64> {
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row.as_ref()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Squared Frobenius norm of `X − 1 x̄ᵀ`.
pub fn consensus_error<V: AsRef<[f64]>>(rows: &[V]) -> f64 {
    let mean = mean_iterate(rows);
    rows.iter()
        .map(|row| {
            row.as_ref()
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>()
        })
        .sum()
}

/// `‖x̄ − x*‖²`.
pub fn optimality_gap(xbar: &[f64], reference: &ReferenceSolution) -> f64 {
    squared_distance(xbar, &reference.x_star)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn record(
    k: u64,
    states: &[AgentState],
    objective: &dyn Objective,
    reference: &ReferenceSolution,
) -> TrajectoryRecord {
    let xs: Vec<&[f64]> = states.iter().map(|s| s.x.as_slice()).collect();
    let xbar = mean_iterate(&xs);
    let gap_z = states
        .iter()
        .map(|s| objective.global_value(&s.z()) - reference.f_star)
        .sum::<f64>()
        / states.len() as f64;
    TrajectoryRecord {
        k,
        r_k: optimality_gap(&xbar, reference),
        consensus_sq: consensus_error(&xs),
        gap_z,
        gap_xbar: objective.global_value(&xbar) - reference.f_star,
    }
}

/// Box-constrained minimizer computed centrally.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// Bound on the fixed-point residual `‖x* − P[x* − ∇f(x*)]‖`.
    pub tol: f64,
    pub iterations: u64,
}

impl ReferenceSolution {
    /// Text record: `x_star = ...`, `f_star = ...`, `tol = ...`, `iterations = ...`.
    pub fn to_text(&self) -> String {
        let xs: Vec<String> = self.x_star.iter().map(f64::to_string).collect();
        format!(
            "x_star = {}\nf_star = {}\ntol = {}\niterations = {}\n",
            xs.join(" "),
            self.f_star,
            self.tol,
            self.iterations
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut x_star = None;
        let mut f_star = None;
        let mut tol = None;
        let mut iterations = None;
        let bad = |what: &str| Error::Config(format!("reference record: bad {what}"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad("line"))?;
            let value = value.trim();
            match key.trim() {
                "x_star" => {
                    x_star = Some(
                        value
                            .split_whitespace()
                            .map(|v| v.parse::<f64>().map_err(|_| bad("x_star")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "f_star" => f_star = Some(value.parse().map_err(|_| bad("f_star"))?),
                "tol" => tol = Some(value.parse().map_err(|_| bad("tol"))?),
                "iterations" => iterations = Some(value.parse().map_err(|_| bad("iterations"))?),
                other => {
                    return Err(Error::Config(format!(
                        "reference record: unknown key {other:?}"
                    )))
                }
            }
        }
        Ok(ReferenceSolution {
            x_star: x_star.ok_or_else(|| bad("x_star (missing)"))?,
            f_star: f_star.ok_or_else(|| bad("f_star (missing)"))?,
            tol: tol.ok_or_else(|| bad("tol (missing)"))?,
            iterations: iterations.ok_or_else(|| bad("iterations (missing)"))?,
        })
    }
}

const REFERENCE_MAX_ITERATIONS: u64 = 2_000_000;

/// Minimizes a smooth convex objective over its box by accelerated projected
/// gradient descent (backtracking, gradient-based restart), then repeats from the opposite box corner and
/// requires the two optimal values to agree within `10 tol`.
pub fn reference_optimum(f: &dyn Objective, tol: f64) -> Result<ReferenceSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let bx = f.feasible_box();
    let d = f.dim();
    let first = projected_gradient(f, vec![bx.lo; d], tol)?;
    let second = projected_gradient(f, vec![bx.hi; d], tol)?;
    let diff = (first.f_star - second.f_star).abs();
    if diff > 10.0 * tol {
        return Err(Error::ReferenceMismatch {
            diff,
            bound: 10.0 * tol,
        });
    }
    Ok(if second.f_star < first.f_star {
        second
    } else {
        first
    })
}

fn projected_residual(x: &[f64], grad: &[f64], bx: BoxSet) -> f64 {
    x.iter()
        .zip(grad)
        .map(|(xi, gi)| {
            let r = xi - (xi - gi).clamp(bx.lo, bx.hi);
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

fn projected_gradient(f: &dyn Objective, mut x: Vec<f64>, tol: f64) -> Result<ReferenceSolution> {
    let bx = f.feasible_box();
    let d = x.len();
    let mut grad = vec![0.0; d];
    let mut y = x.clone();
    let mut gy = vec![0.0; d];
    let mut trial = vec![0.0; d];
    let mut step = 1.0;
    let mut momentum = 1.0f64;
    let mut residual = f64::INFINITY;
    for it in 0..REFERENCE_MAX_ITERATIONS {
        f.global_subgradient(&x, &mut grad);
        residual = projected_residual(&x, &grad, bx);
        if residual <= tol {
            return Ok(ReferenceSolution {
                f_star: f.global_value(&x),
                x_star: x,
                tol,
                iterations: it,
            });
        }
        // backtracking from the extrapolated point; the step only shrinks, and
        // the slack absorbs rounding once decreases drop below f64 resolution
        let fy = f.global_value(&y);
        f.global_subgradient(&y, &mut gy);
        let slack = 8.0 * f64::EPSILON * fy.abs().max(1.0);
        loop {
            for ((t, yi), gi) in trial.iter_mut().zip(&y).zip(&gy) {
                *t = (yi - step * gi).clamp(bx.lo, bx.hi);
            }
            let ft = f.global_value(&trial);
            let (mut lin, mut sq) = (0.0, 0.0);
            for ((t, yi), gi) in trial.iter().zip(&y).zip(&gy) {
                lin += gi * (t - yi);
                sq += (t - yi) * (t - yi);
            }
            if ft <= fy + lin + sq / (2.0 * step) + slack || step < 1e-300 {
                break;
            }
            step *= 0.5;
        }
        // restart when the momentum direction opposes the gradient mapping
        let opposing: f64 = y
            .iter()
            .zip(&trial)
            .zip(&x)
            .map(|((yi, t), xi)| (yi - t) * (t - xi))
            .sum();
        if opposing > 0.0 {
            momentum = 1.0;
        }
        let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let w = (momentum - 1.0) / next;
        momentum = next;
        for ((yi, t), xi) in y.iter_mut().zip(&trial).zip(&x) {
            *yi = (t + w * (t - xi)).clamp(bx.lo, bx.hi);
        }
        std::mem::swap(&mut x, &mut trial);
    }
    Err(Error::NoConvergence {
        residual,
        iterations: REFERENCE_MAX_ITERATIONS,
    })
}

/// Predicted exponent `χ = max(λβ − λα, 1 + λα − 4λβ)` of the decay of
/// `f(z_k) − f*`.
pub fn predicted_rate(lambda_alpha: f64, lambda_beta: f64) -> f64 {
    (lambda_beta - lambda_alpha).max(1.0 + lambda_alpha - 4.0 * lambda_beta)
}

/// Whether `(λα, λβ)` lies in the range where [`predicted_rate`] applies:
/// `1/2 < λα ≤ 1`, `1/2 < λβ < 1`, `2λβ > λα`.
pub fn rate_exponents_valid(lambda_alpha: f64, lambda_beta: f64) -> bool {
    lambda_alpha > 0.5
        && lambda_alpha <= 1.0
        && lambda_beta > 0.5
        && lambda_beta < 1.0
        && 2.0 * lambda_beta > lambda_alpha
}

/// The `λα` that balances both terms of [`predicted_rate`]:
/// `λα = (5/2)λβ − 1/2`, valid for `1/2 < λβ ≤ 3/5`.
pub fn optimal_lambda_alpha(lambda_beta: f64) -> Result<f64> {
    if !(lambda_beta > 0.5 && lambda_beta <= 0.6) {
        return Err(Error::LambdaBetaOutOfRange(lambda_beta));
    }
    let la = 2.5 * lambda_beta - 0.5;
    debug_assert!(((lambda_beta - la) - (1.0 + la - 4.0 * lambda_beta)).abs() < 1e-12);
    Ok(la)
}

/// Least-squares fit of `log(value)` against `log(k + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
    /// Tail records skipped because their value was not positive.
    pub dropped_nonpositive: usize,
}

/// Fits the log-log slope over the last `tail_fraction` of `series`.
pub fn fit_empirical_rate(series: &[(u64, f64)], tail_fraction: f64) -> Result<RateFit> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tail fraction must lie in (0, 1], got {tail_fraction}"
        )));
    }
    let take = ((series.len() as f64 * tail_fraction).ceil() as usize).min(series.len());
    let tail = &series[series.len() - take..];
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .map(|&(k, v)| (((k + 1) as f64).ln(), v.ln()))
        .collect();
    let dropped = tail.len() - pts.len();
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two positive tail points, have {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in &pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "tail has a single distinct k".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
        dropped_nonpositive: dropped,
    })
}

/// Product `Π_{k≤K} (1 − δ x_k)` and partial sum `Σ_{k≤K} Π_{t≤k} (1 − δ x_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductCheck {
    pub final_product: f64,
    pub partial_sum: f64,
}

/// Running product and partial sum. Factors lie in `[0, 1)`, so the product
/// only shrinks; once it underflows it is zero, which is also its limit.
pub fn product_check(seq: impl Fn(u64) -> f64, delta: f64, k_max: u64) -> Result<ProductCheck> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    let mut partial = 0.0;
    let mut product = 1.0;
    for k in 0..=k_max {
        let x = seq(k);
        if !(x > 0.0 && x <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "x_{k} = {x} outside (0, 1]"
            )));
        }
        product *= 1.0 - delta * x;
        partial += product;
    }
    Ok(ProductCheck {
        final_product: product,
        partial_sum: partial,
    })
}

/// [`product_check`] for the power-law sequence `x_k = (k+1)^-exponent`.
pub fn power_law_product_check(exponent: f64, delta: f64, k_max: u64) -> Result<ProductCheck> {
    if exponent.is_nan() || exponent < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "exponent must be non-negative, got {exponent}"
        )));
    }
    product_check(|k| ((k + 1) as f64).powf(-exponent), delta, k_max)
}

/// Time-average weight diagnostics at one horizon `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightHorizon {
    pub horizon: u64,
    /// `Σ_t γ_K^t`
    pub gamma_sum: f64,
    /// `γ^{j+1}/α_{j+1} (1 − μ α_{j+1}) ≤ γ^j/α_j` for every `j < K`.
    pub chain_holds: bool,
    /// Largest relative excess of the chain's left side over its right side.
    pub worst_chain_excess: f64,
    /// `Σ_t γ_K^t β_t² / α_t`
    pub beta_sq_over_alpha: f64,
    /// `Σ_t γ_K^t α_t / β_t`
    pub alpha_over_beta: f64,
    /// `Σ_j |γ^j/α_j − γ^{j+1}/α_{j+1}|`
    pub ratio_variation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightConditionReport {
    pub mu: f64,
    pub horizons: Vec<WeightHorizon>,
}

impl WeightConditionReport {
    pub fn weights_normalized(&self) -> bool {
        self.horizons
            .iter()
            .all(|h| (h.gamma_sum - 1.0).abs() <= 1e-12)
    }

    pub fn chain_holds(&self) -> bool {
        self.horizons.iter().all(|h| h.chain_holds)
    }

    /// Both weighted sums strictly decrease along the horizon ladder.
    pub fn sums_decreasing(&self) -> bool {
        self.horizons.windows(2).all(|w| {
            w[1].beta_sq_over_alpha < w[0].beta_sq_over_alpha
                && w[1].alpha_over_beta < w[0].alpha_over_beta
        })
    }

    /// The ratio variation does not grow along the horizon ladder. Variations
    /// below `1e-12` count as zero (a flat ratio accumulates only rounding).
    pub fn variation_nonincreasing(&self) -> bool {
        self.horizons
            .windows(2)
            .all(|w| w[1].ratio_variation <= w[0].ratio_variation * (1.0 + 1e-12) + 1e-12)
    }

    pub fn passed(&self) -> bool {
        self.weights_normalized()
            && self.chain_holds()
            && self.sums_decreasing()
            && self.variation_nonincreasing()
    }

    /// Which hypothesis set the chain condition was checked against.
    pub fn condition_set(&self) -> &'static str {
        if self.mu > 0.0 {
            "strongly convex (chain includes the 1 − μα factor)"
        } else {
            "convex (plain ratio chain)"
        }
    }
}

impl fmt::Display for WeightConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "weight conditions, {} with μ = {}",
            self.condition_set(),
            self.mu
        )?;
        writeln!(
            f,
            "{:>8} {:>20} {:>6} {:>14} {:>14} {:>14}",
            "K", "Σγ", "chain", "Σγβ²/α", "Σγα/β", "ratio var."
        )?;
        for h in &self.horizons {
            writeln!(
                f,
                "{:>8} {:>20.17} {:>6} {:>14.6e} {:>14.6e} {:>14.6e}",
                h.horizon,
                h.gamma_sum,
                if h.chain_holds { "ok" } else { "FAIL" },
                h.beta_sq_over_alpha,
                h.alpha_over_beta,
                h.ratio_variation
            )?;
        }
        let mut verdict = String::new();
        let _ = write!(
            verdict,
            "Σγ = 1: {}; chain: {}; sums strictly decreasing in K: {}; variation non-increasing in K: {}",
            pass(self.weights_normalized()),
            pass(self.chain_holds()),
            pass(self.sums_decreasing()),
            pass(self.variation_nonincreasing()),
        );
        writeln!(f, "{verdict}")
    }
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Materializes the normalized weights `γ_K^t ∝ (t+1)^-λγ` for each horizon
/// and evaluates the weight hypotheses. The limit conditions can only be
/// observed as a trend across the horizon ladder.
pub fn weight_condition_check(
    schedule: &Schedule,
    mu: f64,
    horizons: &[u64],
) -> WeightConditionReport {
    let mut out = Vec::with_capacity(horizons.len());
    for &big_k in horizons {
        let raw: Vec<f64> = (0..=big_k).map(|t| schedule.gamma_weight(t)).collect();
        let total: f64 = raw.iter().sum();
        let gamma: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let ratio: Vec<f64> = (0..=big_k)
            .map(|t| gamma[t as usize] / schedule.alpha(t))
            .collect();

        let mut worst = f64::NEG_INFINITY;
        let mut variation = 0.0;
        for j in 0..big_k as usize {
            let lhs = ratio[j + 1] * (1.0 - mu * schedule.alpha(j as u64 + 1));
            worst = worst.max((lhs - ratio[j]) / ratio[j]);
            variation += (ratio[j] - ratio[j + 1]).abs();
        }
        let (mut s_beta, mut s_alpha) = (0.0, 0.0);
        for t in 0..=big_k {
            let (a, b) = (schedule.alpha(t), schedule.beta(t));
            s_beta += gamma[t as usize] * b * b / a;
            s_alpha += gamma[t as usize] * a / b;
        }
        out.push(WeightHorizon {
            horizon: big_k,
            gamma_sum: gamma.iter().sum(),
            chain_holds: big_k == 0 || worst <= 1e-12,
            worst_chain_excess: if big_k == 0 { 0.0 } else { worst },
            beta_sq_over_alpha: s_beta,
            alpha_over_beta: s_alpha,
            ratio_variation: variation,
        });
    }
    WeightConditionReport { mu, horizons: out }
}
