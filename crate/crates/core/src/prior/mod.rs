//! Synthetic graph prior: SCM features and labels on top of cSBM, ER or BA
//! structure, split into train/test tasks.

pub mod scm;
pub mod stats;
pub mod structure;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, Task};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub use scm::{run_scm, sample_scm, Activation, ScmNode, ScmPrior, ScmSpec};
pub use structure::{
    csbm_block_probs, csbm_p_out, sample_ba_edges, sample_csbm_edges, sample_er_edges, sample_power,
    sample_sbm_edges,
};

/// Maximum SCM resamples for one task before giving up.
pub const SCM_RETRIES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("invalid prior configuration: {0}")]
    Config(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("no valid task after {0} attempts")]
    RetriesExhausted(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsbmPrior {
    pub h_range: (f64, f64),
    pub p_in_range: (f64, f64),
}

impl Default for CsbmPrior {
    fn default() -> Self {
        Self { h_range: (0.1, 0.9), p_in_range: (0.01, 0.1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErPrior {
    pub p_er_range: (f64, f64),
}

impl Default for ErPrior {
    fn default() -> Self {
        Self { p_er_range: (0.01, 0.05) }
    }
}

/// Barabási–Albert structure, used only for ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaPrior {
    pub enabled: bool,
    /// Probability of BA per graph when enabled (1.0 = BA only).
    pub fraction: f64,
    pub attachment_m_range: (usize, usize),
}

impl Default for BaPrior {
    fn default() -> Self {
        Self { enabled: false, fraction: 1.0, attachment_m_range: (1, 8) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub n_nodes: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    /// Success parameter of the truncated geometric class-count law.
    pub class_geometric_p: f64,
    pub feature_dim_range: (usize, usize),
    /// Probability of an ER graph; the rest are cSBM.
    pub er_fraction: f64,
    pub csbm: CsbmPrior,
    pub er: ErPrior,
    pub ba: BaPrior,
    pub scm: ScmPrior,
    pub split_fraction_range: (f64, f64),
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            n_nodes: 1024,
            min_classes: 1,
            max_classes: 20,
            class_geometric_p: 0.08,
            feature_dim_range: (3, 100),
            er_fraction: 0.5,
            csbm: CsbmPrior::default(),
            er: ErPrior::default(),
            ba: BaPrior::default(),
            scm: ScmPrior::default(),
            split_fraction_range: (0.2, 0.8),
        }
    }
}

fn check_prob_range(name: &str, (lo, hi): (f64, f64)) -> Result<(), PriorError> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(PriorError::Config(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

impl PriorConfig {
    /// The small configuration used for desk-scale pre-training: 128 nodes,
    /// 2–5 classes, up to 16 features.
    pub fn desk() -> Self {
        Self {
            n_nodes: 128,
            min_classes: 2,
            max_classes: 5,
            feature_dim_range: (3, 16),
            // denser graphs keep the per-node degree comparable at 128 nodes
            csbm: CsbmPrior { h_range: (0.1, 0.9), p_in_range: (0.05, 0.3) },
            er: ErPrior { p_er_range: (0.02, 0.1) },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        if self.n_nodes < 2 {
            return Err(PriorError::Config("n_nodes must be at least 2".into()));
        }
        if self.min_classes < 1 || self.min_classes > self.max_classes || self.max_classes > 20 {
            return Err(PriorError::Config(format!(
                "class range ({}, {}) must satisfy 1 <= min <= max <= 20",
                self.min_classes, self.max_classes
            )));
        }
        if !(self.class_geometric_p > 0.0 && self.class_geometric_p <= 1.0) {
            return Err(PriorError::Config("class_geometric_p must be in (0, 1]".into()));
        }
        let (flo, fhi) = self.feature_dim_range;
        if flo < 1 || flo > fhi {
            return Err(PriorError::Config(format!("feature range ({flo}, {fhi}) is empty")));
        }
        if !(0.0..=1.0).contains(&self.er_fraction) || !(0.0..=1.0).contains(&self.ba.fraction) {
            return Err(PriorError::Config("family fractions must be probabilities".into()));
        }
        check_prob_range("h", self.csbm.h_range)?;
        if self.csbm.h_range.0 <= 0.0 {
            return Err(PriorError::Config("h must be positive".into()));
        }
        check_prob_range("p_in", self.csbm.p_in_range)?;
        if self.csbm.p_in_range.0 <= 0.0 || self.csbm.p_in_range.1 >= 1.0 {
            return Err(PriorError::Config("p_in must lie in (0, 1)".into()));
        }
        check_prob_range("p_er", self.er.p_er_range)?;
        check_prob_range("split fraction", self.split_fraction_range)?;
        let (mlo, mhi) = self.ba.attachment_m_range;
        if self.ba.enabled && (mlo < 1 || mlo > mhi || mhi >= self.n_nodes) {
            return Err(PriorError::Config(format!("BA attachment range ({mlo}, {mhi}) is invalid")));
        }
        Ok(())
    }

    /// Class count: `min + K` with `K` a geometric variable truncated to
    /// `0..=max−min`, which favours fewer classes.
    pub fn sample_class_count(&self, rng: &mut Rng) -> usize {
        let span = self.max_classes - self.min_classes;
        let q = 1.0 - self.class_geometric_p;
        let weights: Vec<f64> = (0..=span).map(|k| q.powi(k as i32)).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                return self.min_classes + k;
            }
            u -= w;
        }
        self.max_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum StructureInfo {
    Csbm { h: f64, p_in: f64 },
    Er { p_er: f64 },
    Ba { m: usize },
}

/// Generation metadata of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub structure: StructureInfo,
    pub n_classes: usize,
    pub n_features: usize,
    pub scm_attempts: usize,
}

fn uniform(range: (f64, f64), rng: &mut Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Samples features and labels from a fresh SCM, retrying degenerate draws.
fn sample_features_labels(
    cfg: &PriorConfig,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<(crate::linalg::Matrix, Vec<usize>, usize), PriorError> {
    for attempt in 1..=SCM_RETRIES {
        let spec = sample_scm(cfg, rng)?;
        match scm::run_scm(&spec, cfg.n_nodes, n_classes, spec.max_features(), rng) {
            Ok((x, y)) => return Ok((x, y, attempt)),
            Err(PriorError::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(PriorError::RetriesExhausted(SCM_RETRIES))
}

/// Moves nodes so that every class present among test nodes also appears
/// among train nodes. Prefers swapping with a train node whose class stays
/// covered; otherwise moves the test node into the train split.
pub fn ensure_class_coverage(labels: &[usize], n_classes: usize, train: &mut Vec<usize>, test: &mut Vec<usize>) {
    let mut train_count = vec![0usize; n_classes];
    for &i in train.iter() {
        train_count[labels[i]] += 1;
    }
    let mut k = 0;
    while k < test.len() {
        let v = test[k];
        let c = labels[v];
        if train_count[c] > 0 {
            k += 1;
            continue;
        }
        if let Some(pos) = train.iter().position(|&u| train_count[labels[u]] >= 2) {
            let u = train[pos];
            train_count[labels[u]] -= 1;
            train[pos] = v;
            test[k] = u;
            train_count[c] += 1;
            // the swapped-in node's class is covered, re-examine this slot
        } else if test.len() > 1 {
            test.remove(k);
            train.push(v);
            train_count[c] += 1;
        } else {
            break;
        }
    }
    train.sort_unstable();
    test.sort_unstable();
}

/// Draws one complete pre-training task from the prior.
pub fn assemble_task_with_info(cfg: &PriorConfig, rng: &mut Rng) -> Result<(Task, TaskInfo), PriorError> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let n_classes = cfg.sample_class_count(rng);
    let (x, y, scm_attempts) = sample_features_labels(cfg, n_classes, rng)?;
    let n_features = x.cols;

    let structure = if cfg.ba.enabled && rng.random::<f64>() < cfg.ba.fraction {
        let (lo, hi) = cfg.ba.attachment_m_range;
        StructureInfo::Ba { m: rng.random_range(lo..=hi) }
    } else if rng.random::<f64>() < cfg.er_fraction {
        StructureInfo::Er { p_er: uniform(cfg.er.p_er_range, rng) }
    } else {
        StructureInfo::Csbm { h: uniform(cfg.csbm.h_range, rng), p_in: uniform(cfg.csbm.p_in_range, rng) }
    };
    let edges = match structure {
        StructureInfo::Ba { m } => sample_ba_edges(n, m, rng)?,
        StructureInfo::Er { p_er } => sample_er_edges(n, p_er, rng)?,
        StructureInfo::Csbm { h, p_in } => {
            let probs = csbm_block_probs(n_classes, h, p_in, rng)?;
            sample_sbm_edges(&y, &probs, rng)
        }
    };

    let frac = uniform(cfg.split_fraction_range, rng);
    let n_train = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    ensure_class_coverage(&y, n_classes, &mut train, &mut test);

    let graph = Graph::new(edges, x, y, n_classes)?;
    let task = Task::new(graph, train, test)?;
    let info = TaskInfo { structure, n_classes, n_features, scm_attempts };
    Ok((task, info))
}

pub fn assemble_task(cfg: &PriorConfig, rng: &mut Rng) -> Result<Task, PriorError> {
    assemble_task_with_info(cfg, rng).map(|(t, _)| t)
}

/// Anything that can produce a task from a seed.
pub trait TaskSampler: Sync {
    fn sample_task(&self, seed: u64) -> Result<Task, PriorError>;
}

impl TaskSampler for PriorConfig {
    /// Retries with derived seeds when a draw exhausts its SCM budget.
    fn sample_task(&self, seed: u64) -> Result<Task, PriorError> {
        let mut last = PriorError::RetriesExhausted(SCM_RETRIES);
        for reseed in 0..SCM_RETRIES as u64 {
            let s = if reseed == 0 { seed } else { derive_seed(&[seed, reseed]) };
            match assemble_task(self, &mut rng_from_seed(s)) {
                Ok(t) => return Ok(t),
                Err(e @ PriorError::RetriesExhausted(_)) => last = e,
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }
}
