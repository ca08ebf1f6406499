//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nodepfn::baselines::{self, ClosedFormConfig, FilterMatrix, LabelPropConfig, Solver};
use nodepfn::graph::{canonicalize_edges, edge_homophily};
use nodepfn::harness::{HarnessError, Settings};
use nodepfn::inference::{self, GraphInput, InferenceConfig, PpdMatrix};
use nodepfn::io::{Checkpoint, DatasetFile};
use nodepfn::linalg::Matrix;
use nodepfn::model::ModelParams;
use nodepfn::prior::TaskSampler;
use nodepfn::training::{StepRecord, Trainer as CoreTrainer};

fn err(e: impl Into<HarnessError>) -> PyErr {
    let e: HarnessError = e.into();
    match e {
        HarnessError::Numerical(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn settings(desk: bool, config: Option<&str>) -> PyResult<Settings> {
    let base = if desk { Settings::desk() } else { Settings::default() };
    match config {
        Some(text) => base.overlay_toml(text).map_err(err),
        None => Ok(base),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature rows have different lengths"));
    }
    Ok(Matrix::from_vec(n, d, rows.into_iter().flatten().collect()))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn ppd_dict<'py>(py: Python<'py>, ppd: &PpdMatrix) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("probs", rows(&ppd.probs))?;
    d.set_item("classes", ppd.classes.clone())?;
    d.set_item("labels", ppd.argmax_labels())?;
    d.set_item("test_ids", ppd.test_ids.clone())?;
    Ok(d)
}

struct OwnedInput {
    x: Matrix,
    edges: Vec<(usize, usize)>,
    train_ids: Vec<usize>,
    train_labels: Vec<usize>,
    test_ids: Vec<usize>,
}

impl OwnedInput {
    fn new(
        x: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        train_ids: Vec<usize>,
        train_labels: Vec<usize>,
        test_ids: Vec<usize>,
    ) -> PyResult<Self> {
        Ok(Self { x: matrix(x)?, edges: canonicalize_edges(edges), train_ids, train_labels, test_ids })
    }

    fn view(&self) -> GraphInput<'_> {
        GraphInput {
            x: &self.x,
            edges: &self.edges,
            train_ids: &self.train_ids,
            train_labels: &self.train_labels,
            test_ids: &self.test_ids,
        }
    }
}

/// Trained (or freshly initialized) network weights with their configuration.
#[pyclass(module = "pynodepfn")]
struct Model {
    ckpt: Checkpoint,
}

#[pymethods]
impl Model {
    /// Fresh weights; `config` is a TOML overlay (only `[model]` is used).
    #[new]
    #[pyo3(signature = (desk = true, config = None))]
    fn new(desk: bool, config: Option<&str>) -> PyResult<Self> {
        let s = settings(desk, config)?;
        let params = ModelParams::init(&s.model).map_err(err)?;
        Ok(Self { ckpt: Checkpoint::inference_only(s.model, params) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { ckpt: Checkpoint::load(path.as_ref()).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.ckpt.save(path.as_ref()).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.ckpt.params.num_scalars()
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.ckpt.model_config).expect("json")
    }

    /// Class probabilities for `test_ids` given labeled `train_ids`.
    #[pyo3(signature = (x, edges, train_ids, train_labels, test_ids, ensemble_size = 32, n_components = None, smoothing_steps = 0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        edges: Vec<(usize, usize)>,
        train_ids: Vec<usize>,
        train_labels: Vec<usize>,
        test_ids: Vec<usize>,
        ensemble_size: usize,
        n_components: Option<usize>,
        smoothing_steps: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let input = OwnedInput::new(x, edges, train_ids, train_labels, test_ids)?;
        let icfg = InferenceConfig { ensemble_size, n_components, smoothing_steps, seed, ..InferenceConfig::default() };
        let ckpt = &self.ckpt;
        let ppd = py
            .detach(|| inference::predict(&input.view(), &ckpt.params, &ckpt.model_config, &icfg))
            .map_err(err)?;
        ppd_dict(py, &ppd)
    }
}

fn record_dict<'py>(py: Python<'py>, r: &StepRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("epoch", r.epoch)?;
    d.set_item("loss", r.loss)?;
    d.set_item("running_loss", r.running_loss)?;
    d.set_item("lr", r.lr)?;
    d.set_item("grad_norm", r.grad_norm)?;
    d.set_item("skipped", r.skipped)?;
    d.set_item("val_loss", r.val_loss)?;
    Ok(d)
}

/// Pre-training loop over tasks sampled from the synthetic prior.
#[pyclass(module = "pynodepfn")]
struct Trainer {
    inner: CoreTrainer<nodepfn::prior::PriorConfig>,
}

#[pymethods]
impl Trainer {
    /// `config` is a TOML overlay with `[model]`, `[train]` and `[prior]` tables.
    #[new]
    #[pyo3(signature = (desk = true, config = None))]
    fn new(desk: bool, config: Option<&str>) -> PyResult<Self> {
        let s = settings(desk, config)?;
        let inner = CoreTrainer::new(s.model, s.train, s.prior).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, desk = true, config = None))]
    fn resume(path: &str, desk: bool, config: Option<&str>) -> PyResult<Self> {
        let s = settings(desk, config)?;
        let ckpt = Checkpoint::load(path.as_ref()).map_err(err)?;
        Ok(Self { inner: CoreTrainer::resume(&ckpt, s.train, s.prior).map_err(err)? })
    }

    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let inner = &mut self.inner;
        let rec = py.detach(|| inner.step()).map_err(err)?;
        record_dict(py, &rec)
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    #[getter]
    fn global_step(&self) -> u64 {
        self.inner.position.global_step
    }

    /// Writes a resumable checkpoint.
    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.checkpoint(serde_json::Value::Null).save(path.as_ref()).map_err(err)
    }

    /// Current weights as an inference model.
    fn model(&self) -> Model {
        Model { ckpt: Checkpoint::inference_only(self.inner.model_cfg.clone(), self.inner.params.clone()) }
    }
}

fn task_dict<'py>(py: Python<'py>, task: &nodepfn::graph::Task) -> PyResult<Bound<'py, PyDict>> {
    let g = &task.graph;
    let d = PyDict::new(py);
    d.set_item("x", rows(&g.x))?;
    d.set_item("edges", g.edges.clone())?;
    d.set_item("labels", g.y.clone())?;
    d.set_item("n_classes", g.n_classes)?;
    d.set_item("train_ids", task.train_ids.clone())?;
    d.set_item("test_ids", task.test_ids.clone())?;
    Ok(d)
}

/// One task from the synthetic prior as a dict of plain lists.
#[pyfunction]
#[pyo3(signature = (seed, desk = true, config = None))]
fn sample_task<'py>(py: Python<'py>, seed: u64, desk: bool, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let s = settings(desk, config)?;
    let task = py.detach(|| s.prior.sample_task(seed)).map_err(err)?;
    task_dict(py, &task)
}

#[pyfunction]
#[pyo3(signature = (x, edges, train_ids, train_labels, test_ids, alpha = 0.9, iters = 100))]
fn label_propagation<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    train_ids: Vec<usize>,
    train_labels: Vec<usize>,
    test_ids: Vec<usize>,
    alpha: f64,
    iters: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let input = OwnedInput::new(x, edges, train_ids, train_labels, test_ids)?;
    let cfg = LabelPropConfig { alpha, iters, ..LabelPropConfig::default() };
    let ppd = baselines::label_propagation(&input.view(), &cfg).map_err(err)?;
    ppd_dict(py, &ppd)
}

/// Closed-form regression on filtered features; `filter` is one of
/// "identity", "low_pass" or "high_pass". Returns predicted labels.
#[pyfunction]
#[pyo3(signature = (x, edges, train_ids, train_labels, test_ids, filter = "low_pass", k = 2, ridge = 1e-4, pinv = false))]
#[allow(clippy::too_many_arguments)]
fn closed_form(
    x: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    train_ids: Vec<usize>,
    train_labels: Vec<usize>,
    test_ids: Vec<usize>,
    filter: &str,
    k: usize,
    ridge: f64,
    pinv: bool,
) -> PyResult<Vec<usize>> {
    let filter = match filter {
        "identity" => FilterMatrix::Identity,
        "low_pass" => FilterMatrix::LowPass { k },
        "high_pass" => FilterMatrix::HighPass,
        other => return Err(PyValueError::new_err(format!("unknown filter `{other}`"))),
    };
    let input = OwnedInput::new(x, edges, train_ids, train_labels, test_ids)?;
    let solver = if pinv { Solver::PseudoInverse } else { Solver::Ridge };
    let out = baselines::closed_form_classify(&input.view(), &ClosedFormConfig { filter, ridge, solver }).map_err(err)?;
    Ok(out.labels)
}

#[pyfunction(name = "edge_homophily")]
fn py_edge_homophily(edges: Vec<(usize, usize)>, labels: Vec<usize>) -> PyResult<f64> {
    edge_homophily(&canonicalize_edges(edges), &labels).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Reads a dataset file into a dict; unknown labels are -1.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let ds = DatasetFile::load(path.as_ref()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("x", rows(&ds.x))?;
    d.set_item("edges", ds.edges.clone())?;
    d.set_item("labels", ds.labels.clone())?;
    d.set_item("n_classes", ds.n_classes)?;
    d.set_item("train_ids", ds.train_ids.clone())?;
    d.set_item("test_ids", ds.test_ids.clone())?;
    if let Some(p) = &ds.predictions {
        d.set_item("pred_probs", rows(&p.probs))?;
        d.set_item("pred_labels", p.labels.clone())?;
        d.set_item("pred_classes", p.classes.clone())?;
    }
    Ok(d)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn save_dataset(
    path: &str,
    x: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    labels: Vec<i32>,
    n_classes: usize,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
) -> PyResult<()> {
    let mut train_ids = train_ids;
    let mut test_ids = test_ids;
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let ds = DatasetFile {
        n_classes,
        x: matrix(x)?,
        labels,
        edges: canonicalize_edges(edges),
        train_ids,
        test_ids,
        predictions: None,
        meta: None,
    };
    ds.validate().map_err(err)?;
    ds.save(path.as_ref()).map_err(err)
}

#[pymodule]
fn pynodepfn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(sample_task, m)?)?;
    m.add_function(wrap_pyfunction!(label_propagation, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(py_edge_homophily, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    Ok(())
}
