use std::borrow::Cow;
use std::marker::PhantomData;
use std::sync::Arc;

use rand::Rng as _;

use super::{normalize_adjacency, FusionMode, LayerParams, ModelConfig, ModelError, ModelParams, ParamVars, Params};
use crate::graph::Task;
use crate::inference::pad_features;
use crate::linalg::Matrix;
use crate::numerics::{self as nx, NumericsError, Real, SparseMatrix, Tape, Tensor, Var};
use crate::rng::{rng_from_seed, Rng};

/// Operations the network is written against. [`Tape`] records them for
/// the reverse pass; [`Eager`] only computes values and frees intermediates.
pub trait Backend {
    type V: Clone;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError>;
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError>;
    fn add_row(&mut self, x: &Self::V, row: &Self::V) -> Result<Self::V, NumericsError>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError>;
    fn scale(&mut self, a: &Self::V, s: Real) -> Result<Self::V, NumericsError>;
    fn gelu(&mut self, a: &Self::V) -> Result<Self::V, NumericsError>;
    fn softmax_rows(&mut self, a: &Self::V) -> Result<Self::V, NumericsError>;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V, NumericsError>;
    fn spmm(&mut self, a: &Arc<SparseMatrix>, x: &Self::V) -> Result<Self::V, NumericsError>;
    fn gather_rows(&mut self, x: &Self::V, idx: &Arc<Vec<usize>>) -> Result<Self::V, NumericsError>;
    fn slice_cols(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V, NumericsError>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V, NumericsError>;
}

impl Backend for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }
    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor {
        Tape::value(self, *v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        Tape::matmul(self, *a, *b)
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        Tape::matmul_nt(self, *a, *b)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        Tape::add(self, *a, *b)
    }
    fn add_row(&mut self, x: &Var, row: &Var) -> Result<Var, NumericsError> {
        Tape::add_row(self, *x, *row)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        Tape::mul(self, *a, *b)
    }
    fn scale(&mut self, a: &Var, s: Real) -> Result<Var, NumericsError> {
        Tape::scale(self, *a, s)
    }
    fn gelu(&mut self, a: &Var) -> Result<Var, NumericsError> {
        Tape::gelu(self, *a)
    }
    fn softmax_rows(&mut self, a: &Var) -> Result<Var, NumericsError> {
        Tape::softmax_rows(self, *a)
    }
    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var, NumericsError> {
        Tape::layer_norm(self, *x, *gamma, *beta)
    }
    fn spmm(&mut self, a: &Arc<SparseMatrix>, x: &Var) -> Result<Var, NumericsError> {
        Tape::spmm(self, a.clone(), *x)
    }
    fn gather_rows(&mut self, x: &Var, idx: &Arc<Vec<usize>>) -> Result<Var, NumericsError> {
        Tape::gather_rows(self, *x, idx.clone())
    }
    fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        Tape::slice_cols(self, *x, start, end)
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        Tape::concat_cols(self, parts)
    }
}

/// Value-only evaluation; parameters are borrowed, intermediates owned.
#[derive(Default)]
pub struct Eager<'p>(PhantomData<&'p ()>);

impl<'p> Backend for Eager<'p> {
    type V = Cow<'p, Tensor>;

    fn constant(&mut self, t: Tensor) -> Self::V {
        Cow::Owned(t)
    }
    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor {
        v
    }
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError> {
        nx::matmul(a, b).map(Cow::Owned)
    }
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError> {
        nx::matmul_nt(a, b).map(Cow::Owned)
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError> {
        nx::add(a, b).map(Cow::Owned)
    }
    fn add_row(&mut self, x: &Self::V, row: &Self::V) -> Result<Self::V, NumericsError> {
        nx::add_row(x, row).map(Cow::Owned)
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V, NumericsError> {
        nx::mul(a, b).map(Cow::Owned)
    }
    fn scale(&mut self, a: &Self::V, s: Real) -> Result<Self::V, NumericsError> {
        nx::scale(a, s).map(Cow::Owned)
    }
    fn gelu(&mut self, a: &Self::V) -> Result<Self::V, NumericsError> {
        nx::gelu(a).map(Cow::Owned)
    }
    fn softmax_rows(&mut self, a: &Self::V) -> Result<Self::V, NumericsError> {
        nx::softmax_rows(a).map(Cow::Owned)
    }
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V, NumericsError> {
        nx::layer_norm(x, gamma, beta).map(Cow::Owned)
    }
    fn spmm(&mut self, a: &Arc<SparseMatrix>, x: &Self::V) -> Result<Self::V, NumericsError> {
        nx::spmm(a, x).map(Cow::Owned)
    }
    fn gather_rows(&mut self, x: &Self::V, idx: &Arc<Vec<usize>>) -> Result<Self::V, NumericsError> {
        nx::gather_rows(x, idx).map(Cow::Owned)
    }
    fn slice_cols(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V, NumericsError> {
        nx::slice_cols(x, start, end).map(Cow::Owned)
    }
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V, NumericsError> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        nx::concat_cols(&refs).map(Cow::Owned)
    }
}

/// Model-ready view of a task: padded features, one-hot context labels,
/// normalized adjacency and the context/query split.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    /// `n × d_feat_max`
    pub features: Tensor,
    /// `n × max_classes`; rows outside the context are zero.
    pub label_onehot: Tensor,
    pub adjacency: Arc<SparseMatrix>,
    pub train_ids: Arc<Vec<usize>>,
    pub test_ids: Arc<Vec<usize>>,
    pub train_labels: Vec<usize>,
    pub n_classes: usize,
    /// Query labels when known (pre-training, evaluation).
    pub test_labels: Option<Vec<usize>>,
}

impl PreparedTask {
    /// Nodes in neither id list still take part in message passing.
    pub fn new(
        x: &Matrix,
        edges: &[(usize, usize)],
        train_ids: &[usize],
        train_labels: &[usize],
        test_ids: &[usize],
        n_classes: usize,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let n = x.rows;
        let bad = |m: String| Err(ModelError::Input(m));
        if train_ids.is_empty() {
            return bad("the context (train) split is empty".into());
        }
        if train_ids.len() != train_labels.len() {
            return bad(format!("{} train ids but {} labels", train_ids.len(), train_labels.len()));
        }
        if n_classes == 0 || n_classes > cfg.max_classes {
            return bad(format!("{n_classes} classes outside 1..={}", cfg.max_classes));
        }
        let mut role = vec![0u8; n];
        for (ids, tag) in [(train_ids, 1u8), (test_ids, 2u8)] {
            for &i in ids {
                if i >= n {
                    return bad(format!("node id {i} out of range for {n} nodes"));
                }
                if role[i] != 0 {
                    return bad(format!("node {i} listed twice in the split"));
                }
                role[i] = tag;
            }
        }
        for &(i, j) in edges {
            if i >= n || j >= n {
                return bad(format!("edge ({i}, {j}) out of range for {n} nodes"));
            }
        }
        let padded = pad_features(x, cfg.d_feat_max).map_err(|e| ModelError::Input(e.to_string()))?;
        let features = Tensor::from_matrix(n, cfg.d_feat_max, padded.data.iter().map(|&v| v as Real).collect())?;
        let mut onehot = vec![0.0; n * cfg.max_classes];
        for (&i, &c) in train_ids.iter().zip(train_labels) {
            if c >= n_classes {
                return bad(format!("label {c} of node {i} outside [0, {n_classes})"));
            }
            onehot[i * cfg.max_classes + c] = 1.0;
        }
        Ok(Self {
            features,
            label_onehot: Tensor::from_matrix(n, cfg.max_classes, onehot)?,
            adjacency: normalize_adjacency(n, edges, cfg.self_loops).matrix,
            train_ids: Arc::new(train_ids.to_vec()),
            test_ids: Arc::new(test_ids.to_vec()),
            train_labels: train_labels.to_vec(),
            n_classes,
            test_labels: None,
        })
    }

    pub fn from_task(task: &Task, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let g = &task.graph;
        let mut p = Self::new(&g.x, &g.edges, &task.train_ids, &task.train_labels(), &task.test_ids, g.n_classes, cfg)?;
        p.test_labels = Some(task.test_labels());
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Enables dropout (when configured) with masks drawn from `seed`.
    Train { seed: u64 },
}

struct Dropout {
    rate: f64,
    rng: Rng,
}

impl Dropout {
    fn apply<B: Backend>(&mut self, b: &mut B, v: B::V) -> Result<B::V, NumericsError> {
        let shape = b.value(&v).shape().to_vec();
        let keep = 1.0 / (1.0 - self.rate);
        let len = shape.iter().product();
        let mask = (0..len).map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep as Real }).collect();
        let m = b.constant(Tensor::new(shape, mask)?);
        b.mul(&v, &m)
    }
}

fn maybe_drop<B: Backend>(b: &mut B, v: B::V, drop: &mut Option<Dropout>) -> Result<B::V, NumericsError> {
    match drop {
        Some(d) => d.apply(b, v),
        None => Ok(v),
    }
}

/// `X·W_Xᵀ + Y·W_Yᵀ`, where `Y` carries one-hot labels on context rows only.
pub fn embed<B: Backend>(b: &mut B, p: &Params<B::V>, task: &PreparedTask) -> Result<B::V, ModelError> {
    let x = b.constant(task.features.clone());
    let y = b.constant(task.label_onehot.clone());
    let hx = b.matmul_nt(&x, &p.feature_embed)?;
    let hy = b.matmul_nt(&y, &p.label_embed)?;
    Ok(b.add(&hx, &hy)?)
}

/// Multi-head attention in which every row queries the context rows only.
pub fn attention_branch<B: Backend>(
    b: &mut B,
    h: &B::V,
    layer: &LayerParams<B::V>,
    task: &PreparedTask,
    cfg: &ModelConfig,
) -> Result<B::V, ModelError> {
    if task.train_ids.is_empty() {
        return Err(ModelError::Input("attention needs at least one context node".into()));
    }
    let dh = cfg.head_dim();
    let q = b.matmul_nt(h, &layer.attn_q)?;
    let q = b.scale(&q, 1.0 / (dh as Real).sqrt())?;
    let ctx = b.gather_rows(h, &task.train_ids)?;
    let k = b.matmul_nt(&ctx, &layer.attn_k)?;
    let v = b.matmul_nt(&ctx, &layer.attn_v)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let (s, e) = (head * dh, (head + 1) * dh);
        let qh = b.slice_cols(&q, s, e)?;
        let kh = b.slice_cols(&k, s, e)?;
        let vh = b.slice_cols(&v, s, e)?;
        let scores = b.matmul_nt(&qh, &kh)?;
        let weights = b.softmax_rows(&scores)?;
        heads.push(b.matmul(&weights, &vh)?);
    }
    let merged = b.concat_cols(&heads)?;
    Ok(b.matmul_nt(&merged, &layer.attn_o)?)
}

/// `GELU(Ã·H·W_Mᵀ)`
pub fn mpnn_branch<B: Backend>(b: &mut B, h: &B::V, w: &B::V, task: &PreparedTask) -> Result<B::V, ModelError> {
    let agg = b.spmm(&task.adjacency, h)?;
    let lin = b.matmul_nt(&agg, w)?;
    Ok(b.gelu(&lin)?)
}

fn dual_branch_layer_inner<B: Backend>(
    b: &mut B,
    h: &B::V,
    layer: &LayerParams<B::V>,
    task: &PreparedTask,
    cfg: &ModelConfig,
    drop: &mut Option<Dropout>,
) -> Result<B::V, ModelError> {
    let attn = attention_branch(b, h, layer, task, cfg)?;
    let attn = maybe_drop(b, attn, drop)?;
    let with_attn = b.add(h, &attn)?;
    let out = match (&layer.mpnn, cfg.fusion_mode) {
        (None, _) => b.layer_norm(&with_attn, &layer.norm_gamma, &layer.norm_beta)?,
        (Some(w), FusionMode::Parallel) => {
            let m = mpnn_branch(b, h, w, task)?;
            let m = maybe_drop(b, m, drop)?;
            let sum = b.add(&with_attn, &m)?;
            b.layer_norm(&sum, &layer.norm_gamma, &layer.norm_beta)?
        }
        (Some(w), FusionMode::Sequential) => {
            let (g2, b2) = layer
                .norm2
                .as_ref()
                .ok_or_else(|| ModelError::Config("sequential fusion needs a second normalization".into()))?;
            let h1 = b.layer_norm(&with_attn, &layer.norm_gamma, &layer.norm_beta)?;
            let m = mpnn_branch(b, &h1, w, task)?;
            let m = maybe_drop(b, m, drop)?;
            let sum = b.add(&h1, &m)?;
            b.layer_norm(&sum, g2, b2)?
        }
    };
    let Some(ffn) = &layer.ffn else {
        return Ok(out);
    };
    let hidden = b.matmul_nt(&out, &ffn.w_in)?;
    let hidden = b.add_row(&hidden, &ffn.b_in)?;
    let hidden = b.gelu(&hidden)?;
    let proj = b.matmul_nt(&hidden, &ffn.w_out)?;
    let proj = b.add_row(&proj, &ffn.b_out)?;
    let proj = maybe_drop(b, proj, drop)?;
    let sum = b.add(&out, &proj)?;
    Ok(b.layer_norm(&sum, &ffn.norm_gamma, &ffn.norm_beta)?)
}

/// One attention + message-passing block with residual fusion (no dropout).
pub fn dual_branch_layer<B: Backend>(
    b: &mut B,
    h: &B::V,
    layer: &LayerParams<B::V>,
    task: &PreparedTask,
    cfg: &ModelConfig,
) -> Result<B::V, ModelError> {
    dual_branch_layer_inner(b, h, layer, task, cfg, &mut None)
}

fn run<B: Backend>(
    b: &mut B,
    p: &Params<B::V>,
    task: &PreparedTask,
    cfg: &ModelConfig,
    mode: ForwardMode,
) -> Result<B::V, ModelError> {
    let mut drop = match mode {
        ForwardMode::Train { seed } if cfg.dropout > 0.0 => Some(Dropout { rate: cfg.dropout, rng: rng_from_seed(seed) }),
        _ => None,
    };
    let mut h = embed(b, p, task)?;
    for layer in &p.layers {
        h = dual_branch_layer_inner(b, &h, layer, task, cfg, &mut drop)?;
    }
    let queries = b.gather_rows(&h, &task.test_ids)?;
    Ok(b.matmul_nt(&queries, &p.head)?)
}

/// Records the forward pass on `tape`; returns `|test| × max_classes` logits.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    task: &PreparedTask,
    cfg: &ModelConfig,
    mode: ForwardMode,
) -> Result<Var, ModelError> {
    run(tape, vars, task, cfg, mode)
}

/// Inference-mode logits, `|test| × max_classes`.
pub fn forward(params: &ModelParams, task: &PreparedTask, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    let borrowed: Params<Cow<'_, Tensor>> = params.map(|_, t| Cow::Borrowed(t));
    let mut eager = Eager::default();
    Ok(run(&mut eager, &borrowed, task, cfg, ForwardMode::Eval)?.into_owned())
}

/// Softmax over the first `n_classes` logit columns.
pub fn restricted_softmax(logits: &Tensor, n_classes: usize) -> Result<Tensor, NumericsError> {
    nx::softmax_rows(&nx::slice_cols(logits, 0, n_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_task(n: usize, d: usize, c: usize, seed: u64, edges: bool) -> Task {
        let mut rng = rng_from_seed(seed);
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..n).map(|i| i % c).collect();
        let mut e = Vec::new();
        if edges {
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < 0.3 {
                        e.push((i, j));
                    }
                }
            }
        }
        let g = crate::graph::Graph::new(e, x, y, c).unwrap();
        let train: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
        Task::new(g, train, test).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { d_embed: 8, n_layers: 2, n_heads: 2, d_feat_max: 5, max_classes: 4, init_seed: 3, ..ModelConfig::default() }
    }

    /// Straightforward per-head, per-row reference of one parallel-fusion layer.
    fn reference_layer(h: &Matrix, layer: &LayerParams<Tensor>, task: &PreparedTask, cfg: &ModelConfig) -> Matrix {
        let d = cfg.d_embed;
        let dh = cfg.head_dim();
        let w = |t: &Tensor| Matrix::from_vec(t.rows(), t.cols(), t.to_f64());
        let (wq, wk, wv, wo) = (w(&layer.attn_q), w(&layer.attn_k), w(&layer.attn_v), w(&layer.attn_o));
        let lin = |x: &[f64], m: &Matrix| -> Vec<f64> { (0..m.rows).map(|o| m.row(o).iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
        let n = h.rows;
        let mut out = Matrix::zeros(n, d);
        let ctx = task.train_ids.as_slice();
        for i in 0..n {
            let q = lin(h.row(i), &wq);
            let mut concat = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = ctx
                    .iter()
                    .map(|&j| {
                        let k = lin(h.row(j), &wk);
                        q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (&j, s) in ctx.iter().zip(&scores) {
                    let v = lin(h.row(j), &wv);
                    let a = (s - mx).exp() / z;
                    for c in r.clone() {
                        concat[c] += a * v[c];
                    }
                }
            }
            let attn = lin(&concat, &wo);
            // Ã·H·W_Mᵀ row i
            let mut agg = vec![0.0; d];
            for (j, a) in task.adjacency.row_entries(i) {
                for c in 0..d {
                    agg[c] += a as f64 * h.get(j, c);
                }
            }
            let wm = w(layer.mpnn.as_ref().unwrap());
            let m: Vec<f64> = lin(&agg, &wm)
                .into_iter()
                .map(|x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh()))
                .collect();
            let s: Vec<f64> = (0..d).map(|c| h.get(i, c) + attn[c] + m[c]).collect();
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for c in 0..d {
                let g = layer.norm_gamma.data()[c] as f64;
                let bta = layer.norm_beta.data()[c] as f64;
                out.set(i, c, g * (s[c] - mean) / (var + 1e-5).sqrt() + bta);
            }
        }
        out
    }

    #[test]
    fn layer_matches_reference() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let task = PreparedTask::from_task(&random_task(8, 3, 3, 1, true), &cfg).unwrap();
        let mut eager = Eager::default();
        let p = params.map(|_, t| Cow::Borrowed(t));
        let h = embed(&mut eager, &p, &task).unwrap();
        let out = dual_branch_layer(&mut eager, &h, &p.layers[0], &task, &cfg).unwrap();
        let hm = Matrix::from_vec(h.rows(), h.cols(), h.to_f64());
        let want = reference_layer(&hm, &params.layers[0], &task, &cfg);
        let got = Matrix::from_vec(out.rows(), out.cols(), out.to_f64());
        assert!(got.max_abs_diff(&want) < 1e-10, "{}", got.max_abs_diff(&want));
    }

    #[test]
    fn embedding_is_additive_without_bias() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut t = random_task(6, 3, 3, 2, false);
        t.graph.x.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        let prep = PreparedTask::from_task(&t, &cfg).unwrap();
        let mut eager = Eager::default();
        let p = params.map(|_, t| Cow::Borrowed(t));
        let h = embed(&mut eager, &p, &prep).unwrap();
        assert!(h.row(1).iter().all(|&v| v == 0.0));

        // node 0 as context with label c minus node 0 as query
        let c = t.graph.y[0];
        let as_query = PreparedTask::new(&t.graph.x, &[], &[2], &[t.graph.y[2]], &[0], 3, &cfg).unwrap();
        let h2 = embed(&mut eager, &p, &as_query).unwrap();
        for r in 0..cfg.d_embed {
            let diff = h.get(0, r) - h2.get(0, r);
            assert!((diff - params.label_embed.get(r, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn edgeless_graph_reduces_to_attention_only() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let prep = PreparedTask::from_task(&random_task(7, 4, 2, 4, false), &cfg).unwrap();
        let full = forward(&params, &prep, &cfg).unwrap();
        let ablated_cfg = ModelConfig { mpnn_enabled: false, ..cfg.clone() };
        let mut ablated = params.clone();
        ablated.layers.iter_mut().for_each(|l| l.mpnn = None);
        // GELU(0) = 0, so the message-passing term vanishes exactly
        assert!(full.max_abs_diff(&forward(&ablated, &prep, &ablated_cfg).unwrap()) < 1e-15);
    }

    #[test]
    fn single_context_node_attention_is_its_value() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let t = random_task(5, 3, 2, 5, false);
        let prep = PreparedTask::new(&t.graph.x, &[], &[2], &[1], &[0, 1, 3, 4], 2, &cfg).unwrap();
        let mut eager = Eager::default();
        let p = params.map(|_, t| Cow::Borrowed(t));
        let h = embed(&mut eager, &p, &prep).unwrap();
        let layer = &p.layers[0];
        let attn = attention_branch(&mut eager, &h, layer, &prep, &cfg).unwrap();
        let ctx = nx::gather_rows(&h, &[2]).unwrap();
        let v = nx::matmul_nt(&ctx, &layer.attn_v).unwrap();
        let expected = nx::matmul_nt(&v, &layer.attn_o).unwrap();
        for r in 0..5 {
            for c in 0..cfg.d_embed {
                assert!((attn.get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_and_eager_agree() {
        let cfg = ModelConfig { fusion_mode: FusionMode::Sequential, ffn_enabled: true, ..small_cfg() };
        let params = ModelParams::init(&cfg).unwrap();
        let prep = PreparedTask::from_task(&random_task(9, 5, 4, 6, true), &cfg).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let logits = forward_on_tape(&mut tape, &vars, &prep, &cfg, ForwardMode::Eval).unwrap();
        assert_eq!(tape.value(logits), &forward(&params, &prep, &cfg).unwrap());
        assert_eq!(tape.value(logits).shape(), &[4, 4]);
    }

    #[test]
    fn class_relabeling_permutes_outputs() {
        let cfg = small_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let t = random_task(8, 3, 4, 7, true);
        let pi = [2usize, 0, 3, 1];
        let mut relabeled = t.clone();
        relabeled.graph.y.iter_mut().for_each(|c| *c = pi[*c]);
        let mut permuted = params.clone();
        let d = cfg.d_embed;
        for c in 0..4 {
            for r in 0..d {
                let v = params.label_embed.get(r, c);
                permuted.label_embed.data_mut()[r * cfg.max_classes + pi[c]] = v;
            }
            let src = params.head.row(c).to_vec();
            permuted.head.data_mut()[pi[c] * d..(pi[c] + 1) * d].copy_from_slice(&src);
        }
        let a = forward(&params, &PreparedTask::from_task(&t, &cfg).unwrap(), &cfg).unwrap();
        let b = forward(&permuted, &PreparedTask::from_task(&relabeled, &cfg).unwrap(), &cfg).unwrap();
        for r in 0..a.rows() {
            for c in 0..4 {
                assert!((a.get(r, c) - b.get(r, pi[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restricted_softmax_renormalizes() {
        let logits = Tensor::from_matrix(1, 4, vec![0.0, (3.0 as Real).ln(), 100.0, -5.0]).unwrap();
        let p = restricted_softmax(&logits, 2).unwrap();
        assert!((p.get(0, 0) - 0.25).abs() < 1e-12 && (p.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn input_validation() {
        let cfg = small_cfg();
        let x = Matrix::zeros(3, 2);
        assert!(PreparedTask::new(&x, &[], &[], &[], &[0], 2, &cfg).is_err());
        assert!(PreparedTask::new(&x, &[], &[0], &[2], &[1], 2, &cfg).is_err());
        assert!(PreparedTask::new(&x, &[], &[0], &[0], &[0], 2, &cfg).is_err());
        assert!(PreparedTask::new(&Matrix::zeros(3, 6), &[], &[0], &[0], &[1], 2, &cfg).is_err());
        assert!(PreparedTask::new(&x, &[], &[0], &[0], &[1], 5, &cfg).is_err());
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let cfg = ModelConfig { dropout: 0.5, ..small_cfg() };
        let params = ModelParams::init(&cfg).unwrap();
        let prep = PreparedTask::from_task(&random_task(8, 3, 2, 8, true), &cfg).unwrap();
        let mut t1 = Tape::new();
        let v1 = params.register(&mut t1, false);
        let eval = forward_on_tape(&mut t1, &v1, &prep, &cfg, ForwardMode::Eval).unwrap();
        assert_eq!(t1.value(eval), &forward(&params, &prep, &cfg).unwrap());
        let mut t2 = Tape::new();
        let v2 = params.register(&mut t2, false);
        let train = forward_on_tape(&mut t2, &v2, &prep, &cfg, ForwardMode::Train { seed: 1 }).unwrap();
        assert!(t2.value(train).max_abs_diff(t1.value(eval)) > 1e-6);
    }
}
