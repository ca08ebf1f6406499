//! Structural causal models instantiated as random layered networks.
//!
//! A sampled [`ScmSpec`] is a layered DAG: layer 0 holds source nodes and
//! every later layer computes `act(W · parents) + noise`, where `W` keeps only
//! the retained edges. Features are read from non-final layers and the label
//! from the final layer.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PriorConfig, PriorError};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Elu,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] =
        [Activation::Tanh, Activation::LeakyRelu, Activation::Elu, Activation::Identity];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }
}

/// Position of a causal variable: layer and index within the layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScmNode {
    pub layer: usize,
    pub index: usize,
}

/// Hyper-distributions of the SCM prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmPrior {
    /// ln-space mean and spread of the computed-layer count.
    pub layers_log_mean: f64,
    pub layers_log_std: f64,
    pub layers_range: (usize, usize),
    /// ln-space mean and spread of the hidden width.
    pub hidden_log_mean: f64,
    pub hidden_log_std: f64,
    pub hidden_range: (usize, usize),
    /// Beta(a, b) distribution of the per-SCM edge drop probability.
    pub edge_drop_beta: (f64, f64),
    pub edge_drop_max: f64,
    /// ln-space mean and spread of the per-SCM noise scale; every node
    /// perturbs it by a further log-normal factor of spread `noise_node_log_std`.
    pub noise_log_mean: f64,
    pub noise_log_std: f64,
    pub noise_node_log_std: f64,
    pub activations: Vec<Activation>,
}

impl Default for ScmPrior {
    fn default() -> Self {
        Self {
            layers_log_mean: 3f64.ln(),
            layers_log_std: 0.5,
            layers_range: (2, 8),
            hidden_log_mean: 16f64.ln(),
            hidden_log_std: 0.7,
            hidden_range: (2, 128),
            edge_drop_beta: (1.5, 3.0),
            edge_drop_max: 0.9,
            noise_log_mean: 0.1f64.ln(),
            noise_log_std: 0.7,
            noise_node_log_std: 0.3,
            activations: Activation::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScmSpec {
    /// Width of every layer; layer 0 is the source layer.
    pub layer_sizes: Vec<usize>,
    /// `retained[l-1][i][j]`: edge from node j of layer l−1 into node i of layer l.
    pub retained: Vec<Vec<Vec<bool>>>,
    /// Weights with the same indexing as `retained` (dropped edges hold 0).
    pub weights: Vec<Matrix>,
    /// One activation per computed layer (layers 1..).
    pub activations: Vec<Activation>,
    /// Noise standard deviation of every node, per layer.
    pub noise_scales: Vec<Vec<f64>>,
    pub feature_nodes: Vec<ScmNode>,
    pub label_node: ScmNode,
}

impl ScmSpec {
    /// Checks the structural invariants: consistent shapes, features strictly
    /// before the label layer, every referenced node in range.
    pub fn validate(&self) -> Result<(), PriorError> {
        let layers = self.layer_sizes.len();
        let bad = |m: &str| Err(PriorError::Config(format!("invalid SCM spec: {m}")));
        if layers < 2 {
            return bad("need at least two layers");
        }
        if self.retained.len() != layers - 1
            || self.weights.len() != layers - 1
            || self.activations.len() != layers - 1
            || self.noise_scales.len() != layers
        {
            return bad("per-layer lists have inconsistent lengths");
        }
        for l in 1..layers {
            let w = &self.weights[l - 1];
            if w.rows != self.layer_sizes[l] || w.cols != self.layer_sizes[l - 1] {
                return bad("weight shape");
            }
            if self.retained[l - 1].len() != w.rows || self.retained[l - 1].iter().any(|r| r.len() != w.cols) {
                return bad("mask shape");
            }
        }
        for (l, s) in self.noise_scales.iter().enumerate() {
            if s.len() != self.layer_sizes[l] {
                return bad("noise scale count");
            }
        }
        let in_range = |n: &ScmNode| n.layer < layers && n.index < self.layer_sizes[n.layer];
        if !in_range(&self.label_node) || !self.feature_nodes.iter().all(in_range) {
            return bad("node reference out of range");
        }
        if self.feature_nodes.iter().any(|f| f.layer >= self.label_node.layer) {
            return bad("feature node does not precede the label node");
        }
        Ok(())
    }

    pub fn max_features(&self) -> usize {
        self.feature_nodes.len()
    }
}

/// Discretized noisy log-normal draw clamped to `range`.
fn discretized_log_normal(log_mean: f64, log_std: f64, range: (usize, usize), rng: &mut Rng) -> usize {
    // "noisy": the location itself is jittered before the draw
    let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1 * log_std;
    let v = LogNormal::new(log_mean + jitter, log_std.max(1e-12)).unwrap().sample(rng);
    (v.round() as usize).clamp(range.0, range.1)
}

/// Samples a random causal network with room for `n_features` feature nodes.
pub fn sample_scm_with_features(prior: &ScmPrior, n_features: usize, rng: &mut Rng) -> Result<ScmSpec, PriorError> {
    if prior.activations.is_empty() {
        return Err(PriorError::Config("SCM activation set is empty".into()));
    }
    if prior.layers_range.0 < 1 || prior.layers_range.0 > prior.layers_range.1 {
        return Err(PriorError::Config("SCM layer range is empty".into()));
    }
    if prior.hidden_range.0 < 1 || prior.hidden_range.0 > prior.hidden_range.1 {
        return Err(PriorError::Config("SCM hidden range is empty".into()));
    }
    let computed = discretized_log_normal(prior.layers_log_mean, prior.layers_log_std, prior.layers_range, rng);
    // at least one intermediate layer sits between the sources and the label
    let computed = computed.max(2);
    let hidden = discretized_log_normal(prior.hidden_log_mean, prior.hidden_log_std, prior.hidden_range, rng);
    let mut layer_sizes = vec![hidden; computed + 1];
    let feature_layers = computed - 1; // layers 1..computed
    let capacity = hidden * feature_layers;
    if capacity < n_features {
        let width = n_features.div_ceil(feature_layers);
        for size in layer_sizes.iter_mut().take(computed).skip(1) {
            *size = width;
        }
    }

    let (a, b) = prior.edge_drop_beta;
    let drop = Beta::new(a, b)
        .map_err(|e| PriorError::Config(format!("edge drop distribution: {e}")))?
        .sample(rng)
        * prior.edge_drop_max;

    let mut retained = Vec::with_capacity(computed);
    let mut weights = Vec::with_capacity(computed);
    let mut activations = Vec::with_capacity(computed);
    for l in 1..=computed {
        let (rows, cols) = (layer_sizes[l], layer_sizes[l - 1]);
        let mask: Vec<Vec<bool>> =
            (0..rows).map(|_| (0..cols).map(|_| rng.random::<f64>() >= drop).collect()).collect();
        let mut w = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let fan_in = mask[i].iter().filter(|&&k| k).count().max(1) as f64;
            for j in 0..cols {
                if mask[i][j] {
                    let g: f64 = rng.sample(StandardNormal);
                    w.set(i, j, g / fan_in.sqrt());
                }
            }
        }
        retained.push(mask);
        weights.push(w);
        activations.push(prior.activations[rng.random_range(0..prior.activations.len())]);
    }

    let base = LogNormal::new(prior.noise_log_mean, prior.noise_log_std.max(1e-12)).unwrap().sample(rng);
    let node_noise = Normal::new(0.0, prior.noise_node_log_std.max(0.0)).unwrap();
    let noise_scales: Vec<Vec<f64>> = layer_sizes
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            (0..w)
                .map(|_| if l == 0 { 1.0 } else { base * node_noise.sample(rng).exp() })
                .collect()
        })
        .collect();

    let mut candidates: Vec<ScmNode> = (1..computed)
        .flat_map(|layer| (0..layer_sizes[layer]).map(move |index| ScmNode { layer, index }))
        .collect();
    candidates.shuffle(rng);
    candidates.truncate(n_features);
    let label_node = ScmNode { layer: computed, index: rng.random_range(0..layer_sizes[computed]) };

    let spec = ScmSpec { layer_sizes, retained, weights, activations, noise_scales, feature_nodes: candidates, label_node };
    spec.validate()?;
    Ok(spec)
}

/// Samples a causal network; the feature count is drawn from the config's
/// feature-dimension range.
pub fn sample_scm(cfg: &PriorConfig, rng: &mut Rng) -> Result<ScmSpec, PriorError> {
    let (lo, hi) = cfg.feature_dim_range;
    if lo < 1 || lo > hi {
        return Err(PriorError::Config(format!("feature range ({lo}, {hi}) is empty")));
    }
    let d = rng.random_range(lo..=hi);
    sample_scm_with_features(&cfg.scm, d, rng)
}

/// Everything produced by one propagation through an SCM.
#[derive(Clone, Debug)]
pub struct ScmOutput {
    /// Standardized features, `n × d`.
    pub x: Matrix,
    pub y: Vec<usize>,
    /// Continuous label-node values before discretization.
    pub label_values: Vec<f64>,
    /// Noise injected at the source layer, `n × width₀`.
    pub source_noise: Matrix,
}

/// Propagates independent Gaussian noise for `n_nodes` samples and reads the
/// first `n_features` designated feature nodes and the label node.
pub fn run_scm_traced(
    spec: &ScmSpec,
    n_nodes: usize,
    n_classes: usize,
    n_features: usize,
    rng: &mut Rng,
) -> Result<ScmOutput, PriorError> {
    if n_classes == 0 {
        return Err(PriorError::Config("need at least one class".into()));
    }
    if n_features > spec.feature_nodes.len() {
        return Err(PriorError::Config(format!(
            "{} features requested, spec provides {}",
            n_features,
            spec.feature_nodes.len()
        )));
    }
    let mut values: Vec<Matrix> = Vec::with_capacity(spec.layer_sizes.len());
    let w0 = spec.layer_sizes[0];
    let mut source = Matrix::zeros(n_nodes, w0);
    for v in source.data.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for r in 0..n_nodes {
        for c in 0..w0 {
            let s = spec.noise_scales[0][c];
            source.set(r, c, source.get(r, c) * s);
        }
    }
    values.push(source.clone());
    for l in 1..spec.layer_sizes.len() {
        let pre = values[l - 1].matmul(&spec.weights[l - 1].transpose());
        let act = spec.activations[l - 1];
        let mut out = pre;
        for r in 0..n_nodes {
            for c in 0..out.cols {
                let eps: f64 = rng.sample(StandardNormal);
                let v = act.apply(out.get(r, c)) + spec.noise_scales[l][c] * eps;
                out.set(r, c, v);
            }
        }
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(PriorError::Degenerate("non-finite SCM propagation".into()));
        }
        values.push(out);
    }

    let mut x = Matrix::from_fn(n_nodes, n_features, |r, c| {
        let node = spec.feature_nodes[c];
        values[node.layer].get(r, node.index)
    });
    x.standardize_columns();
    let label_values: Vec<f64> =
        (0..n_nodes).map(|r| values[spec.label_node.layer].get(r, spec.label_node.index)).collect();
    let y = quantile_bin_labels(&label_values, n_classes, rng)?;
    Ok(ScmOutput { x, y, label_values, source_noise: source })
}

pub fn run_scm(
    spec: &ScmSpec,
    n_nodes: usize,
    n_classes: usize,
    n_features: usize,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<usize>), PriorError> {
    let out = run_scm_traced(spec, n_nodes, n_classes, n_features, rng)?;
    Ok((out.x, out.y))
}

/// Rank-bins continuous values into `n_classes` near-equal bins and then
/// applies a random permutation to the bin indices.
pub fn quantile_bin_labels(values: &[f64], n_classes: usize, rng: &mut Rng) -> Result<Vec<usize>, PriorError> {
    let n = values.len();
    if n_classes > 1 {
        let mut distinct: Vec<f64> = values.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < n_classes {
            return Err(PriorError::Degenerate(format!(
                "label node has {} distinct values for {} classes",
                distinct.len(),
                n_classes
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut perm: Vec<usize> = (0..n_classes).collect();
    perm.shuffle(rng);
    let mut y = vec![0; n];
    for (rank, &node) in order.iter().enumerate() {
        y[node] = perm[rank * n_classes / n.max(1)];
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn chain_spec(w1: f64, w2: f64) -> ScmSpec {
        ScmSpec {
            layer_sizes: vec![1, 1, 1],
            retained: vec![vec![vec![true]], vec![vec![true]]],
            weights: vec![Matrix::from_vec(1, 1, vec![w1]), Matrix::from_vec(1, 1, vec![w2])],
            activations: vec![Activation::Identity, Activation::Identity],
            noise_scales: vec![vec![1.0], vec![0.0], vec![0.0]],
            feature_nodes: vec![ScmNode { layer: 1, index: 0 }],
            label_node: ScmNode { layer: 2, index: 0 },
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn identity_chain_feature_is_affine_in_noise() {
        for w in [2.0, -3.0] {
            let spec = chain_spec(w, 1.0);
            spec.validate().unwrap();
            let out = run_scm_traced(&spec, 200, 2, 1, &mut rng_from_seed(4)).unwrap();
            let feature: Vec<f64> = (0..200).map(|r| out.x.get(r, 0)).collect();
            let noise: Vec<f64> = (0..200).map(|r| out.source_noise.get(r, 0)).collect();
            let rho = correlation(&feature, &noise);
            assert!((rho.abs() - 1.0).abs() < 1e-12);
            assert_eq!(rho.signum(), w.signum());
        }
    }

    #[test]
    fn single_class_labels_are_zero() {
        let spec = chain_spec(1.0, 1.0);
        let (_, y) = run_scm(&spec, 50, 1, 1, &mut rng_from_seed(1)).unwrap();
        assert!(y.iter().all(|&c| c == 0));
    }

    #[test]
    fn quantile_bins_are_balanced() {
        let mut rng = rng_from_seed(8);
        let values: Vec<f64> = (0..103).map(|i| ((i * 7919) % 103) as f64 * 0.37).collect();
        for c in [2, 3, 5, 7, 20] {
            let y = quantile_bin_labels(&values, c, &mut rng).unwrap();
            let mut counts = vec![0usize; c];
            y.iter().for_each(|&l| counts[l] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn constant_label_values_are_degenerate() {
        let mut rng = rng_from_seed(8);
        assert!(matches!(quantile_bin_labels(&[1.0; 10], 3, &mut rng), Err(PriorError::Degenerate(_))));
    }

    #[test]
    fn zero_edge_drop_keeps_full_mlp() {
        let prior = ScmPrior { edge_drop_max: 0.0, ..ScmPrior::default() };
        for seed in 0..20 {
            let spec = sample_scm_with_features(&prior, 5, &mut rng_from_seed(seed)).unwrap();
            assert!(spec.retained.iter().flatten().flatten().all(|&k| k));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let cfg = PriorConfig::default();
        for seed in 0..50 {
            let a = sample_scm(&cfg, &mut rng_from_seed(seed)).unwrap();
            let b = sample_scm(&cfg, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            let (lo, hi) = cfg.feature_dim_range;
            assert!((lo..=hi).contains(&a.max_features()));
        }
    }

    #[test]
    fn feature_after_label_is_rejected() {
        let mut spec = chain_spec(1.0, 1.0);
        spec.feature_nodes = vec![ScmNode { layer: 2, index: 0 }];
        assert!(spec.validate().is_err());
    }
}
