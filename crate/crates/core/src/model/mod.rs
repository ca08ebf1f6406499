//! The dual-branch network: additive feature/label embeddings, masked
//! context-query attention, normalized message passing, residual fusion and
//! a fixed-width classification head.

mod adjacency;
mod forward;

pub use adjacency::{normalize_adjacency, NormalizedAdjacency};
pub use forward::{
    attention_branch, dual_branch_layer, embed, forward, forward_on_tape, mpnn_branch, restricted_softmax, Backend,
    Eager, ForwardMode, PreparedTask,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `LayerNorm(H + Attn(H) + MPNN(H))`
    Parallel,
    /// `H' = LayerNorm(H + Attn(H))`, then `LayerNorm(H' + MPNN(H'))`.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_embed: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Feature capacity; narrower inputs are padded.
    pub d_feat_max: usize,
    pub max_classes: usize,
    pub fusion_mode: FusionMode,
    pub mpnn_enabled: bool,
    /// Feed-forward sublayer after fusion (not part of the base architecture).
    pub ffn_enabled: bool,
    /// Add self-loops before normalizing the adjacency (GCN variant).
    pub self_loops: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_embed: 512,
            n_layers: 12,
            n_heads: 4,
            dropout: 0.0,
            d_feat_max: 100,
            max_classes: 20,
            fusion_mode: FusionMode::Parallel,
            mpnn_enabled: true,
            ffn_enabled: false,
            self_loops: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// 64-wide, 4-layer network sized for CPU pre-training.
    pub fn desk() -> Self {
        Self { d_embed: 64, n_layers: 4, n_heads: 4, d_feat_max: 16, max_classes: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_embed == 0 || self.n_heads == 0 || self.d_embed % self.n_heads != 0 {
            return err(format!("d_embed {} must be a positive multiple of n_heads {}", self.d_embed, self.n_heads));
        }
        if self.max_classes == 0 || self.max_classes > 20 {
            return err(format!("max_classes {} outside 1..=20", self.max_classes));
        }
        if self.d_feat_max == 0 {
            return err("d_feat_max must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.d_embed
    }

    fn uses_second_norm(&self) -> bool {
        self.fusion_mode == FusionMode::Sequential && self.mpnn_enabled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
    pub norm_gamma: T,
    pub norm_beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// Query/key/value projections; rows `h·d_head..(h+1)·d_head` belong to head `h`.
    pub attn_q: T,
    pub attn_k: T,
    pub attn_v: T,
    pub attn_o: T,
    pub mpnn: Option<T>,
    pub norm_gamma: T,
    pub norm_beta: T,
    /// Second normalization, sequential fusion only.
    pub norm2: Option<(T, T)>,
    pub ffn: Option<FfnParams<T>>,
}

/// All learnable tensors, generic over storage so the same layout serves
/// concrete tensors, tape handles and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// `d_embed × d_feat_max`
    pub feature_embed: T,
    /// `d_embed × max_classes`
    pub label_embed: T,
    pub layers: Vec<LayerParams<T>>,
    /// `max_classes × d_embed`
    pub head: T,
}

pub type ModelParams = Params<Tensor>;
pub type ParamVars = Params<Var>;

impl<T> Params<T> {
    /// Visits every tensor in a fixed order with its stable name.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        f("feature_embed", &self.feature_embed);
        f("label_embed", &self.label_embed);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            f(&p("attn_q"), &layer.attn_q);
            f(&p("attn_k"), &layer.attn_k);
            f(&p("attn_v"), &layer.attn_v);
            f(&p("attn_o"), &layer.attn_o);
            if let Some(m) = &layer.mpnn {
                f(&p("mpnn"), m);
            }
            f(&p("norm_gamma"), &layer.norm_gamma);
            f(&p("norm_beta"), &layer.norm_beta);
            if let Some((g, b)) = &layer.norm2 {
                f(&p("norm2_gamma"), g);
                f(&p("norm2_beta"), b);
            }
            if let Some(ffn) = &layer.ffn {
                f(&p("ffn_w_in"), &ffn.w_in);
                f(&p("ffn_b_in"), &ffn.b_in);
                f(&p("ffn_w_out"), &ffn.w_out);
                f(&p("ffn_b_out"), &ffn.b_out);
                f(&p("ffn_norm_gamma"), &ffn.norm_gamma);
                f(&p("ffn_norm_beta"), &ffn.norm_beta);
            }
        }
        f("head", &self.head);
    }

    /// Every tensor in [`Params::for_each`] order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.for_each(|_, t| out.push(t));
        out
    }

    /// Same order as [`Params::tensors`], mutably.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.feature_embed, &mut self.label_embed];
        for layer in &mut self.layers {
            out.extend([&mut layer.attn_q, &mut layer.attn_k, &mut layer.attn_v, &mut layer.attn_o]);
            if let Some(m) = &mut layer.mpnn {
                out.push(m);
            }
            out.extend([&mut layer.norm_gamma, &mut layer.norm_beta]);
            if let Some((g, b)) = &mut layer.norm2 {
                out.extend([g, b]);
            }
            if let Some(ffn) = &mut layer.ffn {
                out.extend([
                    &mut ffn.w_in,
                    &mut ffn.b_in,
                    &mut ffn.w_out,
                    &mut ffn.b_out,
                    &mut ffn.norm_gamma,
                    &mut ffn.norm_beta,
                ]);
            }
        }
        out.push(&mut self.head);
        out
    }

    /// Builds a parameter set of the same layout by mapping every entry.
    pub fn try_map<'a, U, E>(&'a self, mut f: impl FnMut(&str, &'a T) -> Result<U, E>) -> Result<Params<U>, E> {
        let mut g = |prefix: &str, t: &'a T| f(prefix, t);
        let feature_embed = g("feature_embed", &self.feature_embed)?;
        let label_embed = g("label_embed", &self.label_embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn_q = g(&p("attn_q"), &layer.attn_q)?;
            let attn_k = g(&p("attn_k"), &layer.attn_k)?;
            let attn_v = g(&p("attn_v"), &layer.attn_v)?;
            let attn_o = g(&p("attn_o"), &layer.attn_o)?;
            let mpnn = layer.mpnn.as_ref().map(|m| g(&p("mpnn"), m)).transpose()?;
            let norm_gamma = g(&p("norm_gamma"), &layer.norm_gamma)?;
            let norm_beta = g(&p("norm_beta"), &layer.norm_beta)?;
            let norm2 = match &layer.norm2 {
                Some((a, b)) => Some((g(&p("norm2_gamma"), a)?, g(&p("norm2_beta"), b)?)),
                None => None,
            };
            let ffn = match &layer.ffn {
                Some(ffn) => Some(FfnParams {
                    w_in: g(&p("ffn_w_in"), &ffn.w_in)?,
                    b_in: g(&p("ffn_b_in"), &ffn.b_in)?,
                    w_out: g(&p("ffn_w_out"), &ffn.w_out)?,
                    b_out: g(&p("ffn_b_out"), &ffn.b_out)?,
                    norm_gamma: g(&p("ffn_norm_gamma"), &ffn.norm_gamma)?,
                    norm_beta: g(&p("ffn_norm_beta"), &ffn.norm_beta)?,
                }),
                None => None,
            };
            layers.push(LayerParams { attn_q, attn_k, attn_v, attn_o, mpnn, norm_gamma, norm_beta, norm2, ffn });
        }
        let head = g("head", &self.head)?;
        Ok(Params { feature_embed, label_embed, layers, head })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Params<U> {
        self.try_map::<U, std::convert::Infallible>(|n, t| Ok(f(n, t))).unwrap()
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }
}

/// Shapes of every tensor for a config, as a `Params<Vec<usize>>`.
pub fn param_shapes(cfg: &ModelConfig) -> Params<Vec<usize>> {
    let d = cfg.d_embed;
    let sq = || vec![d, d];
    let vec_d = || vec![d];
    let layer = || LayerParams {
        attn_q: sq(),
        attn_k: sq(),
        attn_v: sq(),
        attn_o: sq(),
        mpnn: cfg.mpnn_enabled.then(sq),
        norm_gamma: vec_d(),
        norm_beta: vec_d(),
        norm2: cfg.uses_second_norm().then(|| (vec_d(), vec_d())),
        ffn: cfg.ffn_enabled.then(|| FfnParams {
            w_in: vec![cfg.ffn_hidden(), d],
            b_in: vec![cfg.ffn_hidden()],
            w_out: vec![d, cfg.ffn_hidden()],
            b_out: vec_d(),
            norm_gamma: vec_d(),
            norm_beta: vec_d(),
        }),
    };
    Params {
        feature_embed: vec![d, cfg.d_feat_max],
        label_embed: vec![d, cfg.max_classes],
        layers: (0..cfg.n_layers).map(|_| layer()).collect(),
        head: vec![cfg.max_classes, d],
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor {
    if name.ends_with("gamma") {
        return Tensor::full(shape, 1.0);
    }
    if name.ends_with("beta") || name.contains("ffn_b_") {
        return Tensor::zeros(shape);
    }
    // scaled-uniform fan-in initialization
    let fan_in = *shape.last().unwrap_or(&1) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound) as Real).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = rng_from_seed(cfg.init_seed);
        Ok(param_shapes(cfg).map(|name, shape| init_tensor(name, shape, &mut rng)))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        self.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }

    /// Checks that the layout and shapes match `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = param_shapes(cfg);
        let (mut want, mut got) = (Vec::new(), Vec::new());
        expected.for_each(|n, s| want.push((n.to_string(), s.clone())));
        self.for_each(|n, t| got.push((n.to_string(), t.shape().to_vec())));
        if want != got {
            return Err(ModelError::Config("parameter layout does not match the model configuration".into()));
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each(|_, t| out.extend_from_slice(t.data()));
        out
    }

    pub fn unflatten(&self, flat: &[Real]) -> ModelParams {
        let mut offset = 0;
        self.map(|_, t| {
            let part = flat[offset..offset + t.len()].to_vec();
            offset += t.len();
            Tensor::new(t.shape().to_vec(), part).expect("same shape")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { d_embed: 10, n_heads: 4, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { max_classes: 21, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn default_layout_has_expected_size() {
        let shapes = param_shapes(&ModelConfig::default());
        let mut total = 0;
        shapes.for_each(|_, s| total += s.iter().product::<usize>());
        // 12 layers × (5·512² + 2·512) + 512·100 + 512·20 + 20·512
        assert_eq!(total, 12 * (5 * 512 * 512 + 2 * 512) + 512 * 100 + 512 * 20 + 20 * 512);
    }

    #[test]
    fn init_is_deterministic_and_respects_layout() {
        let cfg = ModelConfig { ffn_enabled: true, fusion_mode: FusionMode::Sequential, ..ModelConfig::desk() };
        let a = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, ModelParams::init(&cfg).unwrap());
        a.check_against(&cfg).unwrap();
        assert!(a.check_against(&ModelConfig::desk()).is_err());
        assert!(a.layers[0].norm_gamma.data().iter().all(|&v| v == 1.0));
        let flat = a.flatten();
        assert_eq!(a.unflatten(&flat), a);
    }

    #[test]
    fn mutable_traversal_matches_named_order() {
        let cfg = ModelConfig { ffn_enabled: true, fusion_mode: FusionMode::Sequential, ..ModelConfig::desk() };
        let mut p = ModelParams::init(&cfg).unwrap();
        for (i, t) in p.tensors_mut().into_iter().enumerate() {
            t.data_mut()[0] = i as Real;
        }
        let firsts: Vec<Real> = p.tensors().iter().map(|t| t.data()[0]).collect();
        assert_eq!(firsts, (0..p.count()).map(|i| i as Real).collect::<Vec<_>>());
    }

    #[test]
    fn names_are_unique() {
        let cfg = ModelConfig { ffn_enabled: true, fusion_mode: FusionMode::Sequential, ..ModelConfig::desk() };
        let names = param_shapes(&cfg).names();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
    }
}
