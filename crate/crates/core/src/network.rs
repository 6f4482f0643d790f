//! Agent network: random geometric graphs on the unit square, lazy Metropolis
//! mixing weights and the spectral quantity that governs mixing speed.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Consecutive failed draws after which graph generation gives up.
pub const MAX_GENERATION_ATTEMPTS: u32 = 10_000;

/// Undirected simple graph with optional node positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    /// Canonical edges `(i, j)` with `i < j`.
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    coords: Vec<[f64; 2]>,
    attempts: u32,
}

impl Graph {
    /// Builds a graph from an edge list. Pairs are unordered; duplicates collapse.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-edge at node {i}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j) in &set {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Graph {
            n,
            edges: set,
            adjacency,
            coords: Vec::new(),
            attempts: 0,
        })
    }

    pub fn path(n: usize) -> Self {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i))).expect("path edges are valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    /// Neighbors of `i`, excluding `i` itself, in ascending order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Size of the self-inclusive neighborhood `{i} ∪ {j : (i, j) ∈ E}`.
    pub fn closed_degree(&self, i: usize) -> usize {
        self.adjacency[i].len() + 1
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Number of draws the generator needed (0 for graphs not built by it).
    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    /// Applies a node relabeling: node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: perm.len(),
                context: "permutation length".into(),
            });
        }
        let mut g = Self::from_edges(self.n, self.edges().map(|(i, j)| (perm[i], perm[j])))?;
        if !self.coords.is_empty() {
            let mut coords = vec![[0.0; 2]; self.n];
            for (i, c) in self.coords.iter().enumerate() {
                coords[perm[i]] = *c;
            }
            g.coords = coords;
        }
        Ok(g)
    }

    /// Edge list, one `i j` pair per line, 0-indexed.
    pub fn edge_list_text(&self) -> String {
        let mut out = String::new();
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Node coordinates, one `x y` pair per line.
    pub fn coords_text(&self) -> String {
        let mut out = String::new();
        for [x, y] in &self.coords {
            let _ = writeln!(out, "{x} {y}");
        }
        out
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.edge_list_text()).map_err(|e| Error::io(path, e))
    }

    pub fn write_coords(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.coords_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the edge-list format written by [`Graph::edge_list_text`].
    pub fn parse_edge_list(n: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace().map(str::parse::<usize>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "edge list line {}: expected `i j`, got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::from_edges(n, edges)
    }
}

/// Draws `n` points uniformly on the unit square and joins pairs closer than
/// `radius`, redrawing everything until the result is connected.
pub fn generate_geometric_graph(n: usize, radius: f64, seed: u64) -> Result<Graph> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "graph needs at least one node".into(),
        ));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive and finite, got {radius}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Topology, 0);
    for attempt in 1..=MAX_GENERATION_ATTEMPTS {
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let mut g = Graph::from_edges(n, threshold_edges(&coords, radius))?;
        if is_connected(&g) {
            g.coords = coords;
            g.attempts = attempt;
            return Ok(g);
        }
    }
    Err(Error::GraphGeneration {
        n,
        radius,
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

fn threshold_edges(coords: &[[f64; 2]], radius: f64) -> Vec<(usize, usize)> {
    let r2 = radius * radius;
    let mut edges = Vec::new();
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            if dx * dx + dy * dy < r2 {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Breadth-first search from node 0 reaches every node.
pub fn is_connected(g: &Graph) -> bool {
    if g.n == 0 {
        return true;
    }
    let mut seen = vec![false; g.n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut visited = 1;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                visited += 1;
                queue.push_back(v);
            }
        }
    }
    visited == g.n
}

/// Symmetric weight matrix used for neighbor averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    sigma2: f64,
    /// Nonzero entries per row as `(column, weight)`, columns ascending.
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Wraps an arbitrary square matrix; no stochasticity is assumed.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                got: entries.ncols(),
                context: "mixing matrix must be square".into(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "mixing matrix has non-finite entries".into(),
            ));
        }
        let sigma2 = second_largest_eigenvalue(&entries);
        let rows = (0..entries.nrows())
            .map(|i| {
                (0..entries.ncols())
                    .filter(|&j| entries[(i, j)] != 0.0)
                    .map(|j| (j, entries[(i, j)]))
                    .collect()
            })
            .collect();
        Ok(MixingMatrix {
            entries,
            sigma2,
            rows,
        })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Second largest eigenvalue magnitude, computed at construction.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.sigma2
    }

    /// Nonzero entries of row `i` (self-weight included).
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Rows as CSV, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n() {
            for j in 0..self.n() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.entries[(i, j)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Lazy Metropolis weights: `a_ij = 1 / (2 max(|N_i|, |N_j|))` on edges, zero
/// off the edge set, and the residual row mass on the diagonal. `|N_i|` counts
/// node `i` itself.
pub fn lazy_metropolis(g: &Graph) -> Result<MixingMatrix> {
    if !is_connected(g) {
        return Err(Error::Disconnected);
    }
    let n = g.n();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, j) in g.edges() {
        let w = 1.0 / (2.0 * g.closed_degree(i).max(g.closed_degree(j)) as f64);
        a[(i, j)] = w;
        a[(j, i)] = w;
    }
    for i in 0..n {
        let off: f64 = g.neighbors(i).iter().map(|&j| a[(i, j)]).sum();
        a[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_entries(a)
}

/// Second largest eigenvalue magnitude. Symmetric input goes through a
/// symmetric eigensolve; anything else falls back to singular values, which
/// coincide with eigenvalue magnitudes in the symmetric case. A 1×1 matrix
/// returns 0.
pub fn second_largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let symmetric = (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= 1e-12));
    let mut mags: Vec<f64> = if symmetric {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|v| v.abs())
            .collect()
    } else {
        m.clone().singular_values().iter().copied().collect()
    };
    mags.sort_by(|a, b| b.total_cmp(a));
    mags[1]
}

/// Outcome of [`verify_doubly_stochastic`].
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticityReport {
    pub tol: f64,
    pub max_row_deviation: f64,
    pub max_col_deviation: f64,
    pub max_asymmetry: f64,
    pub min_entry: f64,
    /// Graph edges carrying a zero weight.
    pub zero_at_edges: Vec<(usize, usize)>,
    /// Off-diagonal positive weights between non-adjacent nodes.
    pub nonzero_off_edges: Vec<(usize, usize)>,
}

impl StochasticityReport {
    pub fn passed(&self) -> bool {
        self.max_row_deviation <= self.tol
            && self.max_col_deviation <= self.tol
            && self.max_asymmetry <= self.tol
            && self.min_entry >= -self.tol
            && self.zero_at_edges.is_empty()
            && self.nonzero_off_edges.is_empty()
    }
}

/// Checks row/column sums, symmetry, sign and the edge support of `m`
/// against `g`.
pub fn verify_doubly_stochastic(m: &MixingMatrix, g: &Graph, tol: f64) -> StochasticityReport {
    let a = m.entries();
    let n = a.nrows();
    let mut report = StochasticityReport {
        tol,
        max_row_deviation: 0.0,
        max_col_deviation: 0.0,
        max_asymmetry: 0.0,
        min_entry: f64::INFINITY,
        zero_at_edges: Vec::new(),
        nonzero_off_edges: Vec::new(),
    };
    if n != g.n() {
        report.max_row_deviation = f64::INFINITY;
        return report;
    }
    for i in 0..n {
        let row: f64 = a.row(i).iter().sum();
        let col: f64 = a.column(i).iter().sum();
        report.max_row_deviation = report.max_row_deviation.max((row - 1.0).abs());
        report.max_col_deviation = report.max_col_deviation.max((col - 1.0).abs());
        for j in 0..n {
            report.min_entry = report.min_entry.min(a[(i, j)]);
            if j > i {
                report.max_asymmetry = report.max_asymmetry.max((a[(i, j)] - a[(j, i)]).abs());
                let edge = g.has_edge(i, j);
                let positive = a[(i, j)] > 0.0 && a[(j, i)] > 0.0;
                if edge && !positive {
                    report.zero_at_edges.push((i, j));
                } else if !edge && (a[(i, j)] != 0.0 || a[(j, i)] != 0.0) {
                    report.nonzero_off_edges.push((i, j));
                }
            }
        }
    }
    report
}
