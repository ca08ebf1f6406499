//! Training-free prediction on arbitrary graphs.

mod features;
mod svd;

pub use features::{aggregate_once, pad_features, signed_power, smooth_features};
pub use svd::{truncated_svd, DENSE_SVD_LIMIT, SVD_OVERSAMPLING, SVD_POWER_ITERATIONS};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::model::{forward, restricted_softmax, ModelConfig, ModelError, ModelParams, PreparedTask};
use crate::numerics::NumericsError;
use crate::rng::{derive_seed, rng_from_seed};

/// Exponent of the signed power transform used by odd ensemble members.
pub const MEMBER_POWER: f64 = 0.9;
const SVD_SEED_BRANCH: u64 = 0x5eed_5d00;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("feature width {width} exceeds model capacity {capacity}; enable SVD reduction")]
    FeatureCapacity { width: usize, capacity: usize },
    #[error("{found} distinct context labels exceed the model's {max} classes")]
    TooManyClasses { found: usize, max: usize },
    #[error("requested {requested} components, at most {max} available")]
    Components { requested: usize, max: usize },
    #[error("truncated SVD failed: {0}")]
    Svd(String),
    #[error("invalid inference input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<LinalgError> for InferenceError {
    fn from(e: LinalgError) -> Self {
        InferenceError::Svd(e.to_string())
    }
}

impl From<NumericsError> for InferenceError {
    fn from(e: NumericsError) -> Self {
        InferenceError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Target width of the truncated SVD; `None` disables it.
    pub n_components: Option<usize>,
    pub smoothing_steps: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Standardize feature columns before any other preprocessing.
    pub standardize: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { n_components: None, smoothing_steps: 0, ensemble_size: 32, seed: 0, standardize: true }
    }
}

impl InferenceConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), InferenceError> {
        if self.ensemble_size == 0 {
            return Err(InferenceError::Input("ensemble_size must be at least 1".into()));
        }
        if let Some(k) = self.n_components {
            if k == 0 || k > model.d_feat_max {
                return Err(InferenceError::Components { requested: k, max: model.d_feat_max });
            }
        }
        Ok(())
    }

    /// Member 0 is untransformed; member `i > 0` permutes feature columns
    /// with a seed derived from `(seed, i)` and, for odd `i`, applies the
    /// signed power transform.
    pub fn members(&self) -> Vec<EnsembleMember> {
        (0..self.ensemble_size)
            .map(|i| match i {
                0 => EnsembleMember::IDENTITY,
                _ => EnsembleMember { permutation_seed: Some(derive_seed(&[self.seed, i as u64])), power: i % 2 == 1 },
            })
            .collect()
    }
}

/// One view of the input features presented to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EnsembleMember {
    pub permutation_seed: Option<u64>,
    pub power: bool,
}

impl EnsembleMember {
    pub const IDENTITY: Self = Self { permutation_seed: None, power: false };

    /// Column order used by this member: output column `j` is input column `perm[j]`.
    pub fn permutation(&self, d: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..d).collect();
        if let Some(s) = self.permutation_seed {
            perm.shuffle(&mut rng_from_seed(s));
        }
        perm
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let permuted = x.select_cols(&self.permutation(x.cols));
        if self.power {
            signed_power(&permuted, MEMBER_POWER)
        } else {
            permuted
        }
    }
}

/// A graph with a labeled context, as seen by inference and the baselines.
/// Nodes in neither id list take part in message passing only.
#[derive(Clone, Copy, Debug)]
pub struct GraphInput<'a> {
    pub x: &'a Matrix,
    pub edges: &'a [(usize, usize)],
    pub train_ids: &'a [usize],
    /// Original label ids, aligned with `train_ids`.
    pub train_labels: &'a [usize],
    pub test_ids: &'a [usize],
}

impl<'a> GraphInput<'a> {
    pub fn n(&self) -> usize {
        self.x.rows
    }

    pub fn with_features(self, x: &'a Matrix) -> Self {
        Self { x, ..self }
    }
}

/// Class distribution per query node, with the mapping back to original labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PpdMatrix {
    /// `|test| × C`, rows sum to 1.
    pub probs: Matrix,
    /// Original label of each column.
    pub classes: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl PpdMatrix {
    /// Most probable original label per row; ties go to the lower column.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.probs.rows)
            .map(|r| {
                let row = self.probs.row(r);
                let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                self.classes[best]
            })
            .collect()
    }

    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        let pred = self.argmax_labels();
        let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len().max(1) as f64
    }
}

/// Maps labels to `0..C` by first appearance; returns canonical labels and
/// the original label of each canonical class.
pub fn canonicalize_labels(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes: Vec<usize> = Vec::new();
    let canon = labels
        .iter()
        .map(|&l| match classes.iter().position(|&c| c == l) {
            Some(i) => i,
            None => {
                classes.push(l);
                classes.len() - 1
            }
        })
        .collect();
    (canon, classes)
}

/// Standardize → smooth → reduce, per the configuration.
pub fn preprocess_features(
    x: &Matrix,
    edges: &[(usize, usize)],
    icfg: &InferenceConfig,
    model: &ModelConfig,
) -> Result<Matrix, InferenceError> {
    let mut x = x.clone();
    if icfg.standardize {
        x.standardize_columns();
    }
    if icfg.smoothing_steps > 0 {
        x = smooth_features(&x, edges, icfg.smoothing_steps);
    }
    if let Some(k) = icfg.n_components {
        let k = k.min(x.rows).min(x.cols);
        if k < x.cols {
            x = truncated_svd(&x, k, derive_seed(&[icfg.seed, SVD_SEED_BRANCH]))?;
            if icfg.standardize {
                x.standardize_columns();
            }
        }
    }
    if x.cols > model.d_feat_max {
        return Err(InferenceError::FeatureCapacity { width: x.cols, capacity: model.d_feat_max });
    }
    Ok(x)
}

/// Averages member outputs (in member order) for already preprocessed features.
pub fn predict_members(
    input: &GraphInput,
    params: &ModelParams,
    model: &ModelConfig,
    members: &[EnsembleMember],
) -> Result<PpdMatrix, InferenceError> {
    let GraphInput { x, edges, train_ids, train_labels, test_ids } = *input;
    if train_ids.len() != train_labels.len() {
        return Err(InferenceError::Input(format!("{} train ids but {} labels", train_ids.len(), train_labels.len())));
    }
    if train_ids.is_empty() {
        return Err(InferenceError::Input("no context (train) nodes".into()));
    }
    if members.is_empty() {
        return Err(InferenceError::Input("no ensemble members".into()));
    }
    let (canon, classes) = canonicalize_labels(train_labels);
    let c = classes.len();
    if c > model.max_classes {
        return Err(InferenceError::TooManyClasses { found: c, max: model.max_classes });
    }
    if c == 1 {
        return Ok(PpdMatrix { probs: Matrix::from_fn(test_ids.len(), 1, |_, _| 1.0), classes, test_ids: test_ids.to_vec() });
    }
    let outputs: Vec<Matrix> = members
        .par_iter()
        .map(|m| {
            let task = PreparedTask::new(&m.apply(x), edges, train_ids, &canon, test_ids, c, model)?;
            let p = restricted_softmax(&forward(params, &task, model)?, c)?;
            Ok(Matrix::from_vec(p.rows(), p.cols(), p.to_f64()))
        })
        .collect::<Result<_, InferenceError>>()?;
    let mut probs = Matrix::zeros(test_ids.len(), c);
    for o in &outputs {
        probs.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / outputs.len() as f64;
    probs.data.iter_mut().for_each(|v| *v *= inv);
    Ok(PpdMatrix { probs, classes, test_ids: test_ids.to_vec() })
}

/// Full pipeline: canonicalize labels, preprocess features, run the
/// ensemble and average the class-restricted softmax outputs.
pub fn predict(
    input: &GraphInput,
    params: &ModelParams,
    model: &ModelConfig,
    icfg: &InferenceConfig,
) -> Result<PpdMatrix, InferenceError> {
    icfg.validate(model)?;
    if input.n() == 0 {
        return Err(InferenceError::Input("empty graph".into()));
    }
    let xp = preprocess_features(input.x, input.edges, icfg, model)?;
    predict_members(&input.with_features(&xp), params, model, &icfg.members())
}
