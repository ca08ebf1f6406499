//! Training-free baselines: label propagation and closed-form graph-filtered
//! regression. The exact posterior predictive oracle lives in [`oracle`].

pub mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{GraphInput, PpdMatrix};
use crate::linalg::{cholesky_solve, symmetric_eigen, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("invalid baseline input: {0}")]
    Input(String),
    #[error("normal equations are singular; increase the ridge ({0})")]
    Singular(String),
    #[error("decomposition failed: {0}")]
    Linalg(String),
}

impl From<LinalgError> for BaselineError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotPositiveDefinite { .. } => BaselineError::Singular(e.to_string()),
            other => BaselineError::Linalg(other.to_string()),
        }
    }
}

/// Distinct labels in ascending order, and each label's index in that order.
fn sorted_classes(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let canon = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    (canon, classes)
}

fn check_input(input: &GraphInput) -> Result<(), BaselineError> {
    let n = input.n();
    if input.train_ids.is_empty() {
        return Err(BaselineError::Input("no labeled nodes".into()));
    }
    if input.train_ids.len() != input.train_labels.len() {
        return Err(BaselineError::Input("train ids and labels differ in length".into()));
    }
    if let Some(&v) = input.train_ids.iter().chain(input.test_ids).find(|&&v| v >= n) {
        return Err(BaselineError::Input(format!("node {v} out of range for {n} nodes")));
    }
    if let Some(&(i, j)) = input.edges.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(BaselineError::Input(format!("edge ({i}, {j}) out of range")));
    }
    Ok(())
}

/// Neighbour lists of `D^(-1/2) A D^(-1/2)` in f64.
pub fn normalized_neighbors(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<(usize, f64)>> {
    let mut deg = vec![0.0f64; n];
    for &(i, j) in edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        let w = 1.0 / (deg[i] * deg[j]).sqrt();
        adj[i].push((j, w));
        adj[j].push((i, w));
    }
    adj
}

fn propagate(adj: &[Vec<(usize, f64)>], x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for (v, nbrs) in adj.iter().enumerate() {
        for &(u, w) in nbrs {
            for c in 0..x.cols {
                out.data[v * x.cols + c] += w * x.get(u, c);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelPropConfig {
    pub alpha: f64,
    pub iters: usize,
    /// Stop once the largest entry change falls below this.
    pub tol: f64,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        Self { alpha: 0.9, iters: 100, tol: 1e-9 }
    }
}

/// `F ← α·Ã·F + (1−α)·Y` with labeled rows clamped to their one-hot seeds;
/// rows are normalized at the end (all-zero rows become uniform).
pub fn label_propagation(input: &GraphInput, cfg: &LabelPropConfig) -> Result<PpdMatrix, BaselineError> {
    check_input(input)?;
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(BaselineError::Input(format!("alpha {} outside (0, 1)", cfg.alpha)));
    }
    let n = input.n();
    let (canon, classes) = sorted_classes(input.train_labels);
    let c = classes.len();
    let mut seeds = Matrix::zeros(n, c);
    for (&v, &k) in input.train_ids.iter().zip(&canon) {
        seeds.set(v, k, 1.0);
    }
    let adj = normalized_neighbors(n, input.edges);
    let mut f = seeds.clone();
    for _ in 0..cfg.iters {
        let mut next = propagate(&adj, &f);
        next.data.iter_mut().zip(&seeds.data).for_each(|(a, y)| *a = cfg.alpha * *a + (1.0 - cfg.alpha) * y);
        for &v in input.train_ids {
            next.row_mut(v).copy_from_slice(seeds.row(v));
        }
        let change = next.max_abs_diff(&f);
        f = next;
        if change < cfg.tol {
            break;
        }
    }
    let mut probs = f.select_rows(input.test_ids);
    for r in 0..probs.rows {
        let row = probs.row_mut(r);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
        }
    }
    Ok(PpdMatrix { probs, classes, test_ids: input.test_ids.to_vec() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FilterMatrix {
    /// Raw features (linear regression).
    Identity,
    /// `Ãᵏ·X` (simplified graph convolution).
    LowPass { k: usize },
    /// `(I − Ã)·X`
    HighPass,
}

impl FilterMatrix {
    pub fn apply(&self, x: &Matrix, edges: &[(usize, usize)]) -> Matrix {
        let adj = normalized_neighbors(x.rows, edges);
        match *self {
            FilterMatrix::Identity => x.clone(),
            FilterMatrix::LowPass { k } => (0..k).fold(x.clone(), |acc, _| propagate(&adj, &acc)),
            FilterMatrix::HighPass => {
                let mut out = x.clone();
                out.data.iter_mut().zip(&propagate(&adj, x).data).for_each(|(a, b)| *a -= b);
                out
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// `(FᵀF + λI)⁻¹FᵀY` by Cholesky.
    Ridge,
    /// Moore–Penrose pseudo-inverse from the eigen-decomposition of `FᵀF`.
    PseudoInverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedFormConfig {
    pub filter: FilterMatrix,
    pub ridge: f64,
    pub solver: Solver,
}

impl Default for ClosedFormConfig {
    fn default() -> Self {
        Self { filter: FilterMatrix::LowPass { k: 2 }, ridge: 1e-4, solver: Solver::Ridge }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormResult {
    /// `|test| × C` regression outputs `F_test·W`.
    pub scores: Matrix,
    /// Original label of each score column (ascending).
    pub classes: Vec<usize>,
    /// Argmax per test node; ties go to the smaller class.
    pub labels: Vec<usize>,
    /// `d × C`
    pub weights: Matrix,
}

fn pseudo_inverse_solve(gram: &Matrix, rhs: &Matrix) -> Result<Matrix, BaselineError> {
    let (vals, vecs) = symmetric_eigen(gram)?;
    let tol = vals.first().copied().unwrap_or(0.0).max(0.0) * gram.rows as f64 * f64::EPSILON;
    // V·diag(1/λ)·Vᵀ·rhs over eigenvalues above tolerance
    let proj = vecs.transpose().matmul(rhs);
    let mut scaled = proj.clone();
    for (i, &l) in vals.iter().enumerate() {
        let inv = if l > tol { 1.0 / l } else { 0.0 };
        scaled.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(vecs.matmul(&scaled))
}

/// Regresses one-hot train labels on filtered features and labels test
/// nodes by the largest output.
pub fn closed_form_classify(input: &GraphInput, cfg: &ClosedFormConfig) -> Result<ClosedFormResult, BaselineError> {
    check_input(input)?;
    if !(cfg.ridge >= 0.0) {
        return Err(BaselineError::Input(format!("ridge {} must be non-negative", cfg.ridge)));
    }
    let (canon, classes) = sorted_classes(input.train_labels);
    let f = cfg.filter.apply(input.x, input.edges);
    let ftr = f.select_rows(input.train_ids);
    let mut y = Matrix::zeros(ftr.rows, classes.len());
    canon.iter().enumerate().for_each(|(r, &k)| y.set(r, k, 1.0));
    let mut gram = ftr.gram();
    let rhs = ftr.transpose().matmul(&y);
    let weights = match cfg.solver {
        Solver::Ridge => {
            for i in 0..gram.rows {
                let v = gram.get(i, i) + cfg.ridge;
                gram.set(i, i, v);
            }
            cholesky_solve(&gram, &rhs)?
        }
        Solver::PseudoInverse => {
            let mut g = gram;
            for i in 0..g.rows {
                let v = g.get(i, i) + cfg.ridge;
                g.set(i, i, v);
            }
            pseudo_inverse_solve(&g, &rhs)?
        }
    };
    let scores = f.select_rows(input.test_ids).matmul(&weights);
    let labels = (0..scores.rows)
        .map(|r| {
            let row = scores.row(r);
            classes[(0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })]
        })
        .collect();
    Ok(ClosedFormResult { scores, classes, labels, weights })
}
