//! Exact posterior predictive distribution over small enumerable priors.
//!
//! A hypothesis is a fully specified generative model: class prior, block
//! edge probabilities and isotropic Gaussian class-conditional features.
//! The posterior over (hypothesis, unknown test labels) is enumerated in log
//! space and marginalized per test node.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::BaselineError;
use crate::graph::{canonicalize_edges, Graph, Task};
use crate::inference::PpdMatrix;
use crate::linalg::Matrix;
use crate::prior::structure::{csbm_p_out, sample_sbm_edges};
use crate::prior::{PriorError, TaskSampler};
use crate::rng::rng_from_seed;

/// Upper bound on the number of joint test labelings enumerated.
pub const MAX_COMPLETIONS: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub name: String,
    pub weight: f64,
    /// Length `C`.
    pub class_prior: Vec<f64>,
    /// `C × C`, symmetric.
    pub block_probs: Matrix,
    /// `C × d`
    pub feature_means: Matrix,
    pub feature_std: f64,
}

impl Hypothesis {
    /// Two-level block model with `p_out = p_in·(1−h)` and uniform classes.
    pub fn csbm(name: &str, weight: f64, h: f64, p_in: f64, feature_means: Matrix, feature_std: f64) -> Self {
        let c = feature_means.rows;
        let p_out = csbm_p_out(p_in, h);
        Self {
            name: name.to_string(),
            weight,
            class_prior: vec![1.0 / c as f64; c],
            block_probs: Matrix::from_fn(c, c, |a, b| if a == b { p_in } else { p_out }),
            feature_means,
            feature_std,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_prior.len()
    }

    fn log_feature(&self, x: &[f64], class: usize) -> f64 {
        let mu = self.feature_means.row(class);
        let var = self.feature_std * self.feature_std;
        let sq: f64 = x.iter().zip(mu).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * sq / var - x.len() as f64 * (self.feature_std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
    }

    /// `log p(y, A, X | hypothesis)` for a complete labeling.
    fn log_joint(&self, labels: &[usize], adj: &[bool], x: &Matrix, log_p: &Matrix, log_q: &Matrix) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for (v, &c) in labels.iter().enumerate() {
            total += self.class_prior[c].ln() + self.log_feature(x.row(v), c);
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (labels[i], labels[j]);
                total += if adj[i * n + j] { log_p.get(a, b) } else { log_q.get(a, b) };
            }
        }
        total
    }
}

/// Finite prior over hypotheses; weights are normalized on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    hypotheses: Vec<Hypothesis>,
}

impl HypothesisSet {
    pub fn new(mut hypotheses: Vec<Hypothesis>) -> Result<Self, BaselineError> {
        let first = hypotheses.first().ok_or_else(|| BaselineError::Input("empty hypothesis set".into()))?;
        let (c, d) = (first.n_classes(), first.feature_means.cols);
        for h in &hypotheses {
            if !(h.weight > 0.0 && h.weight.is_finite()) {
                return Err(BaselineError::Input(format!("hypothesis {} has weight {}", h.name, h.weight)));
            }
            if h.n_classes() != c || h.feature_means.rows != c || h.feature_means.cols != d {
                return Err(BaselineError::Input(format!("hypothesis {} has mismatched shapes", h.name)));
            }
            if h.block_probs.rows != c || h.block_probs.cols != c {
                return Err(BaselineError::Input(format!("hypothesis {} block matrix is not {c}×{c}", h.name)));
            }
            if h.block_probs.data.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(BaselineError::Input(format!("hypothesis {} has a block probability outside [0, 1]", h.name)));
            }
            if h.class_prior.iter().any(|p| !(*p > 0.0)) || (h.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(BaselineError::Input(format!("hypothesis {} class prior is not a distribution", h.name)));
            }
            if !(h.feature_std > 0.0) {
                return Err(BaselineError::Input(format!("hypothesis {} feature std must be positive", h.name)));
            }
        }
        let total: f64 = hypotheses.iter().map(|h| h.weight).sum();
        hypotheses.iter_mut().for_each(|h| h.weight /= total);
        Ok(Self { hypotheses })
    }

    /// Equal-weight pair of two-class block models at the given homophilies,
    /// with class means `±mean_shift` along every feature axis.
    pub fn csbm_pair(h_low: f64, h_high: f64, p_in: f64, n_features: usize, mean_shift: f64, feature_std: f64) -> Self {
        let means = Matrix::from_fn(2, n_features, |c, _| if c == 0 { mean_shift } else { -mean_shift });
        Self::new(vec![
            Hypothesis::csbm(&format!("h={h_low}"), 0.5, h_low, p_in, means.clone(), feature_std),
            Hypothesis::csbm(&format!("h={h_high}"), 0.5, h_high, p_in, means, feature_std),
        ])
        .expect("valid by construction")
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn n_classes(&self) -> usize {
        self.hypotheses[0].n_classes()
    }

    pub fn n_features(&self) -> usize {
        self.hypotheses[0].feature_means.cols
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-test-node class marginals of the exact posterior predictive.
/// Columns are classes `0..C` in order.
pub fn exact_ppd(task: &Task, hyps: &HypothesisSet) -> Result<PpdMatrix, BaselineError> {
    let g = &task.graph;
    let (n, c) = (g.n, hyps.n_classes());
    if g.x.cols != hyps.n_features() {
        return Err(BaselineError::Input(format!("task has {} features, hypotheses expect {}", g.x.cols, hyps.n_features())));
    }
    if g.n_classes > c {
        return Err(BaselineError::Input(format!("task has {} classes, hypotheses cover {c}", g.n_classes)));
    }
    let t = task.test_ids.len();
    let completions = (c as f64).powi(t as i32);
    if completions > MAX_COMPLETIONS as f64 {
        return Err(BaselineError::Input(format!("{completions} test labelings exceed the enumeration limit")));
    }
    let completions = completions as usize;
    let mut adj = vec![false; n * n];
    for &(i, j) in &g.edges {
        adj[i * n + j] = true;
        adj[j * n + i] = true;
    }
    let mut labels = g.y.clone();
    let mut log_w = Vec::with_capacity(hyps.hypotheses.len() * completions);
    for h in &hyps.hypotheses {
        let log_p = Matrix::from_fn(c, c, |a, b| h.block_probs.get(a, b).ln());
        let log_q = Matrix::from_fn(c, c, |a, b| (-h.block_probs.get(a, b)).ln_1p());
        let prior = h.weight.ln();
        for code in 0..completions {
            let mut rest = code;
            for &v in &task.test_ids {
                labels[v] = rest % c;
                rest /= c;
            }
            log_w.push(prior + h.log_joint(&labels, &adj, &g.x, &log_p, &log_q));
        }
    }
    let norm = log_sum_exp(&log_w);
    if norm == f64::NEG_INFINITY {
        return Err(BaselineError::Input("every hypothesis assigns zero probability to the observed task".into()));
    }
    let mut probs = Matrix::zeros(t, c);
    for (idx, lw) in log_w.iter().enumerate() {
        let w = (lw - norm).exp();
        if w == 0.0 {
            continue;
        }
        let mut rest = idx % completions;
        for r in 0..t {
            let k = rest % c;
            rest /= c;
            let v = probs.get(r, k) + w;
            probs.set(r, k, v);
        }
    }
    Ok(PpdMatrix { probs, classes: (0..c).collect(), test_ids: task.test_ids.clone() })
}

/// Task sampler drawing from a hypothesis set: choose a hypothesis by
/// weight, then labels, edges, features and a random split.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePrior {
    pub hypotheses: HypothesisSet,
    pub n_nodes: usize,
    /// Inclusive range for the number of labeled nodes.
    pub train_range: (usize, usize),
}

impl OraclePrior {
    /// The two-hypothesis prior used for oracle comparisons: 10 nodes,
    /// 2 classes, `h ∈ {0.1, 0.9}`, 2-D Gaussian features.
    pub fn small_csbm_pair() -> Self {
        Self { hypotheses: HypothesisSet::csbm_pair(0.1, 0.9, 0.5, 2, 0.5, 1.0), n_nodes: 10, train_range: (2, 8) }
    }

    pub fn sample_with_hypothesis(&self, seed: u64) -> Result<(Task, usize), PriorError> {
        let (lo, hi) = self.train_range;
        if lo == 0 || hi >= self.n_nodes || lo > hi {
            return Err(PriorError::Config(format!("train range {lo}..={hi} invalid for {} nodes", self.n_nodes)));
        }
        let mut rng = rng_from_seed(seed);
        let hs = self.hypotheses.hypotheses();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let which = hs.iter().position(|h| {
            acc += h.weight;
            u < acc
        });
        let which = which.unwrap_or(hs.len() - 1);
        let h = &hs[which];
        let labels: Vec<usize> = (0..self.n_nodes)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                h.class_prior.iter().position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(h.n_classes() - 1)
            })
            .collect();
        let edges = canonicalize_edges(sample_sbm_edges(&labels, &h.block_probs, &mut rng));
        let noise = Normal::new(0.0, h.feature_std).map_err(|e| PriorError::Config(e.to_string()))?;
        let d = h.feature_means.cols;
        let x = Matrix::from_fn(self.n_nodes, d, |v, j| h.feature_means.get(labels[v], j) + noise.sample(&mut rng));
        let n_train = rng.random_range(lo..=hi);
        let mut order: Vec<usize> = (0..self.n_nodes).collect();
        order.shuffle(&mut rng);
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        let graph = Graph::new(edges, x, labels, h.n_classes())?;
        Ok((Task::new(graph, train, test)?, which))
    }
}

impl TaskSampler for OraclePrior {
    fn sample_task(&self, seed: u64) -> Result<Task, PriorError> {
        self.sample_with_hypothesis(seed).map(|(t, _)| t)
    }
}

/// Half the L1 distance between two rows.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
