use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelParams, Params};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, weight_decay: 0.01, eps: 1e-8 }
    }
}

/// First and second moments mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// Updates rejected because of non-finite gradients.
    pub skipped: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape()));
        Self { step: 0, skipped: 0, m: zeros.clone(), v: zeros }
    }

    pub fn check_against(&self, cfg: &ModelConfig) -> bool {
        self.m.check_against(cfg).is_ok() && self.v.check_against(cfg).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// Decoupled-weight-decay Adam update with bias-corrected moments.
/// A gradient containing NaN/Inf leaves everything but `skipped` untouched.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Params<Tensor>,
    state: &mut OptimizerState,
    hp: &AdamWConfig,
    lr: f64,
) -> StepOutcome {
    let grads = grads.tensors();
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        state.skipped += 1;
        return StepOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2, eps) = (hp.beta1 as Real, hp.beta2 as Real, hp.eps as Real);
    let decay = (1.0 - lr * hp.weight_decay) as Real;
    let (step_size, bc2_sqrt) = ((lr / bc1) as Real, bc2.sqrt() as Real);
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grads) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            pd[i] = pd[i] * decay - step_size * md[i] / (vd[i].sqrt() / bc2_sqrt + eps);
        }
    }
    StepOutcome::Applied
}

pub fn global_norm(grads: &Params<Tensor>) -> f64 {
    let mut sq = 0.0f64;
    grads.for_each(|_, g| sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
    sq.sqrt()
}

/// Rescales `grads` so that their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Params<Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = (max_norm / norm) as Real;
        for g in grads.tensors_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
