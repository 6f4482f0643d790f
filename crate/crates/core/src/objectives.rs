//! Local losses held by the agents, their subgradients and the box constraint.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Convexity class of the global objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convexity {
    StronglyConvex {
        mu: f64,
    },
    Convex,
    /// Carried as metadata only; no solver path consumes it.
    WeaklyConvex {
        rho: f64,
    },
}

impl Convexity {
    /// Strong-convexity modulus, 0 when not strongly convex.
    pub fn mu(&self) -> f64 {
        match *self {
            Convexity::StronglyConvex { mu } => mu,
            _ => 0.0,
        }
    }
}

/// Axis-aligned box `[lo, hi]^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSet {
    pub lo: f64,
    pub hi: f64,
}

impl BoxSet {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!("invalid box [{lo}, {hi}]")));
        }
        Ok(BoxSet { lo, hi })
    }

    /// The `[-1, 1]` box.
    pub fn symmetric_unit() -> Self {
        BoxSet { lo: -1.0, hi: 1.0 }
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        for v in x {
            *v = v.clamp(self.lo, self.hi);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|&v| v >= self.lo && v <= self.hi)
    }
}

/// Euclidean projection onto `[lo, hi]^d`.
pub fn project_box(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    assert!(lo <= hi, "project_box requires lo <= hi");
    x.iter().map(|v| v.clamp(lo, hi)).collect()
}

/// A sum-separable problem `min (1/N) Σ f_i(x)` over a box.
pub trait Objective: Send + Sync {
    fn n_agents(&self) -> usize;

    fn dim(&self) -> usize;

    fn local_value(&self, agent: usize, x: &[f64]) -> f64;

    /// Writes a subgradient of `f_agent` at `x` into `out`.
    fn local_subgradient(&self, agent: usize, x: &[f64], out: &mut [f64]);

    /// Lipschitz constant of `f_agent` on the feasible box.
    fn lipschitz_local(&self, agent: usize) -> f64;

    fn convexity(&self) -> Convexity;

    fn feasible_box(&self) -> BoxSet;

    fn lipschitz_global(&self) -> f64 {
        (0..self.n_agents()).map(|i| self.lipschitz_local(i)).sum()
    }

    /// `(1/N) Σ_i f_i(x)`.
    fn global_value(&self, x: &[f64]) -> f64 {
        let n = self.n_agents();
        (0..n).map(|i| self.local_value(i, x)).sum::<f64>() / n as f64
    }

    /// `(1/N) Σ_i g_i(x)`.
    fn global_subgradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_agents();
        let mut g = vec![0.0; self.dim()];
        out.fill(0.0);
        for i in 0..n {
            self.local_subgradient(i, x, &mut g);
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += gi;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
    }
}

/// Free-function form of [`Objective::global_value`].
pub fn global_value(f: &dyn Objective, x: &[f64]) -> f64 {
    f.global_value(x)
}

/// One `(a_i, b_i)` sample per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<(Vec<f64>, f64)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |(a, _)| a.len())
    }

    /// Feature columns then the label column, no header.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for (a, b) in &self.rows {
            let mut rec: Vec<String> = a.iter().map(f64::to_string).collect();
            rec.push(b.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Config(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("dataset value {s:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            let (b, a) = vals
                .split_last()
                .ok_or_else(|| Error::InvalidArgument("empty dataset row".into()))?;
            rows.push((a.to_vec(), *b));
        }
        Ok(Dataset { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// `n` rows of i.i.d. uniform `[0, 1]` features and labels.
pub fn generate_synthetic_dataset(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs n >= 1 and d >= 1, got n = {n}, d = {d}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Dataset, 0);
    let rows = (0..n)
        .map(|_| {
            let a: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            (a, rng.random::<f64>())
        })
        .collect();
    Ok(Dataset { rows })
}

/// Squared-residual losses `f_i(x) = (a_iᵀx - b_i)²`.
#[derive(Debug, Clone)]
pub struct LinearRegression {
    data: Dataset,
    feasible: BoxSet,
    lipschitz: Vec<f64>,
    convexity: Convexity,
}

/// Regression objective over the `[-1, 1]^d` box.
pub fn linear_regression_objective(data: Dataset) -> Result<LinearRegression> {
    LinearRegression::new(data, BoxSet::symmetric_unit())
}

impl LinearRegression {
    pub fn new(data: Dataset, feasible: BoxSet) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let d = data.dim();
        if d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional features".into()));
        }
        for (i, (a, b)) in data.rows.iter().enumerate() {
            if a.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: a.len(),
                    context: format!("dataset row {i}"),
                });
            }
            if a.iter().chain(std::iter::once(b)).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite value in row {i}"
                )));
            }
        }
        let lipschitz = data
            .rows
            .iter()
            .map(|(a, b)| {
                // range of aᵀx over the box, coordinate by coordinate
                let (lo, hi) = a.iter().fold((0.0, 0.0), |(lo, hi), &aj| {
                    let (p, q) = (aj * feasible.lo, aj * feasible.hi);
                    (lo + p.min(q), hi + p.max(q))
                });
                let residual = (lo - b).abs().max((hi - b).abs());
                2.0 * norm(a) * residual
            })
            .collect();
        let mu = smallest_hessian_eigenvalue(&data);
        let convexity = if mu > 1e-12 {
            Convexity::StronglyConvex { mu }
        } else {
            Convexity::Convex
        };
        Ok(LinearRegression {
            data,
            feasible,
            lipschitz,
            convexity,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

/// Smallest eigenvalue of the Hessian `(2/N) Σ a_i a_iᵀ`.
fn smallest_hessian_eigenvalue(data: &Dataset) -> f64 {
    let d = data.dim();
    let n = data.len() as f64;
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (a, _) in &data.rows {
        for r in 0..d {
            for c in 0..d {
                h[(r, c)] += 2.0 * a[r] * a[c] / n;
            }
        }
    }
    h.symmetric_eigen().eigenvalues.min()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Objective for LinearRegression {
    fn n_agents(&self) -> usize {
        self.data.len()
    }

    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn local_value(&self, agent: usize, x: &[f64]) -> f64 {
        let (a, b) = &self.data.rows[agent];
        let r = dot(a, x) - b;
        r * r
    }

    fn local_subgradient(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        let (a, b) = &self.data.rows[agent];
        let r = dot(a, x) - b;
        for (o, aj) in out.iter_mut().zip(a) {
            *o = 2.0 * aj * r;
        }
    }

    fn lipschitz_local(&self, agent: usize) -> f64 {
        self.lipschitz[agent]
    }

    fn convexity(&self) -> Convexity {
        self.convexity
    }

    fn feasible_box(&self) -> BoxSet {
        self.feasible
    }
}

/// `f_i(x) = ‖x - c_i‖²`: strongly convex with `μ = 2`, minimized over the
/// box at the clamped mean of the centers.
#[derive(Debug, Clone)]
pub struct CenteredQuadratic {
    centers: Vec<Vec<f64>>,
    feasible: BoxSet,
}

impl CenteredQuadratic {
    pub fn new(centers: Vec<Vec<f64>>, feasible: BoxSet) -> Result<Self> {
        let d = centers
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidArgument("no centers".into()))?;
        if d == 0 {
            return Err(Error::InvalidArgument("zero-dimensional centers".into()));
        }
        if let Some((i, c)) = centers.iter().enumerate().find(|(_, c)| c.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: c.len(),
                context: format!("center {i}"),
            });
        }
        Ok(CenteredQuadratic { centers, feasible })
    }

    /// Box-clamped mean of the centers.
    pub fn minimizer(&self) -> Vec<f64> {
        let n = self.centers.len() as f64;
        let mut mean = vec![0.0; self.dim()];
        for c in &self.centers {
            for (m, v) in mean.iter_mut().zip(c) {
                *m += v / n;
            }
        }
        project_box(&mean, self.feasible.lo, self.feasible.hi)
    }
}

impl Objective for CenteredQuadratic {
    fn n_agents(&self) -> usize {
        self.centers.len()
    }

    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn local_value(&self, agent: usize, x: &[f64]) -> f64 {
        self.centers[agent]
            .iter()
            .zip(x)
            .map(|(c, v)| (v - c) * (v - c))
            .sum()
    }

    fn local_subgradient(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        for ((o, c), v) in out.iter_mut().zip(&self.centers[agent]).zip(x) {
            *o = 2.0 * (v - c);
        }
    }

    fn lipschitz_local(&self, agent: usize) -> f64 {
        // ‖2(x - c)‖ is largest at the box corner farthest from c
        let far: f64 = self.centers[agent]
            .iter()
            .map(|c| {
                (c - self.feasible.lo)
                    .abs()
                    .max((c - self.feasible.hi).abs())
                    .powi(2)
            })
            .sum();
        2.0 * far.sqrt()
    }

    fn convexity(&self) -> Convexity {
        Convexity::StronglyConvex { mu: 2.0 }
    }

    fn feasible_box(&self) -> BoxSet {
        self.feasible
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(a: Vec<f64>, b: f64) -> LinearRegression {
        linear_regression_objective(Dataset { rows: vec![(a, b)] }).unwrap()
    }

    #[test]
    fn regression_value_and_subgradient_2d() {
        let f = single(vec![1.0, 0.0], 0.0);
        assert_eq!(f.local_value(0, &[1.0, 0.0]), 1.0);
        let mut g = [0.0; 2];
        f.local_subgradient(0, &[1.0, 0.0], &mut g);
        assert_eq!(g, [2.0, 0.0]);
    }

    #[test]
    fn regression_subgradient_matches_finite_differences() {
        let f = single(vec![1.0, 0.0], 0.0);
        let x = [1.0, 0.0];
        let h = 1e-6;
        let mut g = [0.0; 2];
        f.local_subgradient(0, &x, &mut g);
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (f.local_value(0, &xp) - f.local_value(0, &xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5, "coord {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn regression_zero_residual_point() {
        let f = single(vec![0.5, 0.25], 0.5);
        let x = [0.5, 1.0];
        assert_eq!(f.local_value(0, &x), 0.0);
        let mut g = [1.0; 2];
        f.local_subgradient(0, &x, &mut g);
        assert_eq!(g, [0.0, 0.0]);
    }

    #[test]
    fn regression_scalar_hand_values() {
        let f = single(vec![2.0], 1.0);
        assert_eq!(f.local_value(0, &[0.25]), 0.25);
        let mut g = [0.0];
        f.local_subgradient(0, &[0.25], &mut g);
        assert_eq!(g, [-2.0]);
    }

    #[test]
    fn regression_rejects_ragged_rows() {
        let data = Dataset {
            rows: vec![(vec![1.0, 2.0], 0.0), (vec![1.0], 0.0)],
        };
        assert!(matches!(
            linear_regression_objective(data),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(linear_regression_objective(Dataset { rows: vec![] }).is_err());
    }

    #[test]
    fn regression_lipschitz_box_bound() {
        // a = (1, 1), b = 0.5 on [-1, 1]²: aᵀx ∈ [-2, 2], max |aᵀx - b| = 2.5
        let f = single(vec![1.0, 1.0], 0.5);
        assert!((f.lipschitz_local(0) - 2.0 * 2f64.sqrt() * 2.5).abs() < 1e-12);
    }

    #[test]
    fn regression_convexity_from_hessian() {
        let rank_one = single(vec![1.0, 1.0], 0.5);
        assert_eq!(rank_one.convexity(), Convexity::Convex);
        let data = Dataset {
            rows: vec![(vec![1.0, 0.0], 0.0), (vec![0.0, 1.0], 0.0)],
        };
        let f = linear_regression_objective(data).unwrap();
        // (2/2)(e1 e1ᵀ + e2 e2ᵀ) = I
        match f.convexity() {
            Convexity::StronglyConvex { mu } => assert!((mu - 1.0).abs() < 1e-12),
            other => panic!("expected strong convexity, got {other:?}"),
        }
    }

    #[test]
    fn project_box_cases() {
        assert_eq!(project_box(&[2.0, -3.0], -1.0, 1.0), vec![1.0, -1.0]);
        assert_eq!(project_box(&[0.2, -0.7], -1.0, 1.0), vec![0.2, -0.7]);
        assert_eq!(project_box(&[0.5, 1.0000001], -1.0, 1.0), vec![0.5, 1.0]);
    }

    #[test]
    fn global_value_special_cases() {
        let f = single(vec![2.0], 1.0);
        assert_eq!(global_value(&f, &[0.25]), f.local_value(0, &[0.25]));
        let same =
            CenteredQuadratic::new(vec![vec![0.3, 0.1]; 4], BoxSet::symmetric_unit()).unwrap();
        let x = [0.9, -0.4];
        assert!((same.global_value(&x) - same.local_value(0, &x)).abs() < 1e-15);
    }

    #[test]
    fn synthetic_dataset_ranges_and_determinism() {
        let one = generate_synthetic_dataset(1, 1, 3).unwrap();
        let (a, b) = &one.rows[0];
        assert!((0.0..=1.0).contains(&a[0]) && (0.0..=1.0).contains(b));

        let d1 = generate_synthetic_dataset(50, 10, 7).unwrap();
        let d2 = generate_synthetic_dataset(50, 10, 7).unwrap();
        assert_eq!(d1, d2);
        let all: Vec<f64> = d1
            .rows
            .iter()
            .flat_map(|(a, b)| a.iter().copied().chain(std::iter::once(*b)))
            .collect();
        assert_eq!(all.len(), 550);
        assert!(all.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");

        assert!(generate_synthetic_dataset(0, 3, 1).is_err());
        assert!(generate_synthetic_dataset(3, 0, 1).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = generate_synthetic_dataset(5, 3, 11).unwrap();
        let text = d.to_csv().unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.split(',').count() == 4));
        assert_eq!(Dataset::from_csv(&text).unwrap(), d);
    }

    #[test]
    fn centered_quadratic_minimizer_is_clamped_mean() {
        let f = CenteredQuadratic::new(
            vec![vec![3.0, 0.2], vec![1.0, -0.4]],
            BoxSet::symmetric_unit(),
        )
        .unwrap();
        assert_eq!(f.minimizer(), vec![1.0, -0.1]);
        assert_eq!(f.convexity().mu(), 2.0);
    }
}
