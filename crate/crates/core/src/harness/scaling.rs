use std::borrow::Cow;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::linalg::Matrix;
use crate::model::{attention_branch, mpnn_branch, Eager, ModelConfig, ModelParams, Params, PreparedTask};
use crate::numerics::{Real, Tensor};
use crate::rng::rng_from_seed;

/// Which branch of the first layer to time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "branch")]
pub enum ScalingBranch {
    /// Edgeless graphs of `size` nodes, half of them context.
    Attention,
    /// A fixed node count with `size` edges.
    Mpnn { n_nodes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub median_seconds: f64,
    pub samples: Vec<f64>,
}

/// Circulant graph: node `i` joins `i + 1 ..= i + E/n` (mod n), so every
/// size is hit exactly and edges stay unique while `E/n < n/2`.
fn circulant_edges(n: usize, e: usize) -> Result<Vec<(usize, usize)>, HarnessError> {
    let per = e / n;
    if e % n != 0 || per == 0 || 2 * per >= n {
        return Err(HarnessError::Validation(format!("{e} edges cannot be laid out on {n} nodes (need E = k·N, 0 < 2k < N)")));
    }
    let mut edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (1..=per).map(move |k| {
            let j = (i + k) % n;
            (i.min(j), i.max(j))
        }))
        .collect();
    edges.sort_unstable();
    Ok(edges)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Median wall-clock of one first-layer branch evaluation per size.
pub fn measure_scaling(
    params: &ModelParams,
    model: &ModelConfig,
    branch: ScalingBranch,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>, HarnessError> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Validation("sizes must be non-empty and strictly increasing".into()));
    }
    if repeats == 0 {
        return Err(HarnessError::Validation("repeats must be positive".into()));
    }
    if params.layers.is_empty() {
        return Err(HarnessError::Validation("model has no layers".into()));
    }
    let borrowed: Params<Cow<'_, Tensor>> = params.map(|_, t| Cow::Borrowed(t));
    let layer_b = &borrowed.layers[0];
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let (n, edges) = match branch {
            ScalingBranch::Attention => (size, Vec::new()),
            ScalingBranch::Mpnn { n_nodes } => (n_nodes, circulant_edges(n_nodes, size)?),
        };
        if n < 2 {
            return Err(HarnessError::Validation("need at least two nodes".into()));
        }
        let train: Vec<usize> = (0..n / 2).collect();
        let labels: Vec<usize> = train.iter().map(|i| i % 2).collect();
        let test: Vec<usize> = (n / 2..n).collect();
        let x = Matrix::zeros(n, 1);
        let task = PreparedTask::new(&x, &edges, &train, &labels, &test, 2, model)?;
        let data: Vec<Real> = (0..n * model.d_embed).map(|_| rng.random_range(-1.0..1.0) as Real).collect();
        let h = Cow::Owned(Tensor::from_matrix(n, model.d_embed, data)?);
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut b = Eager::default();
            let start = Instant::now();
            let out = match branch {
                ScalingBranch::Attention => attention_branch(&mut b, &h, layer_b, &task, model)?,
                ScalingBranch::Mpnn { .. } => {
                    let w = layer_b
                        .mpnn
                        .as_ref()
                        .ok_or_else(|| HarnessError::Validation("model has no message-passing branch".into()))?;
                    mpnn_branch(&mut b, &h, w, &task)?
                }
            };
            samples.push(start.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        let mut sorted = samples.clone();
        rows.push(ScalingRow { size, median_seconds: median(&mut sorted), samples });
    }
    Ok(rows)
}

/// Least-squares slope of `ln t` against `ln size`.
pub fn fit_exponent(rows: &[ScalingRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.size as f64).ln(), r.median_seconds.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
