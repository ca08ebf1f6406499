//! Experiment drivers shared by the CLI and the acceptance tests:
//! multi-seed evaluation, the homophily sweep and branch timing.

mod config;
mod scaling;
mod sweep;

pub use config::Settings;
pub use scaling::{fit_exponent, measure_scaling, ScalingBranch, ScalingRow};
pub use sweep::{sweep_homophily, GraphLog, Method, SweepConfig, SweepReport, SweepRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::inference::{predict, GraphInput, InferenceConfig, InferenceError};
use crate::io::FormatError;
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::numerics::NumericsError;
use crate::prior::PriorError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl HarnessError {
    /// Process exit code: 2 for invalid input, 3 for numerical trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<InferenceError> for HarnessError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Svd(_) | InferenceError::Model(ModelError::Numerics(_)) => HarnessError::Numerical(e.to_string()),
            other => HarnessError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(_) => HarnessError::Numerical(e.to_string()),
            other => HarnessError::Validation(other.to_string()),
        }
    }
}

impl From<NumericsError> for HarnessError {
    fn from(e: NumericsError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<BaselineError> for HarnessError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Linalg(_) => HarnessError::Numerical(e.to_string()),
            other => HarnessError::Validation(other.to_string()),
        }
    }
}

impl From<PriorError> for HarnessError {
    fn from(e: PriorError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numerics(_) | TrainError::NonFiniteLoss { .. } => HarnessError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => HarnessError::Validation(other.to_string()),
        }
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Most frequent train label for every test node; ties go to the smaller label.
pub fn majority_predict(train_labels: &[usize], n_test: usize) -> Vec<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in train_labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let best = counts.iter().fold((0, 0), |(bl, bc), (&l, &c)| if c > bc { (l, c) } else { (bl, bc) }).0;
    vec![best; n_test]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub n_test: usize,
}

/// Accuracy of the full inference pipeline for each ensemble seed; only the
/// member transforms change between seeds.
pub fn eval_accuracy(
    input: &GraphInput,
    truth: &[usize],
    params: &ModelParams,
    model: &ModelConfig,
    icfg: &InferenceConfig,
    seeds: &[u64],
) -> Result<EvalSummary, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Validation("no evaluation seeds".into()));
    }
    if truth.len() != input.test_ids.len() || truth.is_empty() {
        return Err(HarnessError::Validation("test set is empty or unlabeled".into()));
    }
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let ppd = predict(input, params, model, &InferenceConfig { seed, ..icfg.clone() })?;
            Ok(accuracy(&ppd.argmax_labels(), truth))
        })
        .collect::<Result<Vec<f64>, HarnessError>>()?;
    let (mean_accuracy, std_accuracy) = mean_std(&per_seed);
    Ok(EvalSummary { mean_accuracy, std_accuracy, seeds: seeds.to_vec(), per_seed, n_test: truth.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn majority_breaks_ties_low() {
        assert_eq!(majority_predict(&[3, 1, 3, 1, 2], 2), vec![1, 1]);
        assert_eq!(majority_predict(&[4, 4, 0], 1), vec![4]);
    }

    #[test]
    fn constant_predictor_on_balanced_labels() {
        let truth: Vec<usize> = (0..400).map(|i| i % 4).collect();
        assert!((accuracy(&vec![2; 400], &truth) - 0.25).abs() < 1e-12);
        assert_eq!(accuracy(&truth, &truth), 1.0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Validation("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Numerical("x".into()).exit_code(), 3);
    }
}
