use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{accuracy, majority_predict, mean_std, HarnessError};
use crate::baselines::{closed_form_classify, label_propagation, ClosedFormConfig, FilterMatrix, LabelPropConfig};
use crate::graph::Task;
use crate::inference::{predict, GraphInput, InferenceConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::prior::{BaPrior, CsbmPrior, PriorConfig, TaskSampler};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nodepfn,
    Labelprop,
    /// Closed-form regression on raw features.
    Linear,
    /// Closed-form regression on low-pass filtered features.
    Sgc,
    /// Closed-form regression on high-pass filtered features.
    Hgc,
    Majority,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nodepfn => "nodepfn",
            Method::Labelprop => "labelprop",
            Method::Linear => "linear",
            Method::Sgc => "sgc",
            Method::Hgc => "hgc",
            Method::Majority => "majority",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [Method::Nodepfn, Method::Labelprop, Method::Linear, Method::Sgc, Method::Hgc, Method::Majority]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub h_levels: Vec<f64>,
    pub graphs_per_level: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Base prior; the structure is forced to cSBM at each level.
    pub prior: PriorConfig,
    pub inference: InferenceConfig,
    pub label_prop: LabelPropConfig,
    pub closed_form: ClosedFormConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            h_levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            graphs_per_level: 20,
            seeds: vec![0, 1, 2],
            methods: vec![Method::Nodepfn, Method::Labelprop, Method::Sgc, Method::Majority],
            prior: PriorConfig::desk(),
            inference: InferenceConfig::default(),
            label_prop: LabelPropConfig::default(),
            closed_form: ClosedFormConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.graphs_per_level == 0 {
            return bad("graphs_per_level must be positive".into());
        }
        if self.h_levels.is_empty() || self.h_levels.iter().any(|h| !(*h > 0.0 && *h <= 1.0)) {
            return bad("h levels must be non-empty and lie in (0, 1]".into());
        }
        if self.seeds.len() < 3 {
            return bad(format!("{} seeds given; at least 3 are needed for a spread", self.seeds.len()));
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        Ok(())
    }

    /// The cSBM-only prior used at homophily `h`.
    pub fn level_prior(&self, h: f64) -> PriorConfig {
        PriorConfig {
            er_fraction: 0.0,
            ba: BaPrior { enabled: false, ..self.prior.ba.clone() },
            csbm: CsbmPrior { h_range: (h, h), ..self.prior.csbm.clone() },
            ..self.prior.clone()
        }
    }

    /// Seed of graph `graph` at level index `level` under sweep seed `seed`.
    pub fn task_seed(seed: u64, level: usize, graph: usize) -> u64 {
        derive_seed(&[seed, level as u64, graph as u64])
    }
}

/// Accuracy of one method on one generated graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphLog {
    pub h: f64,
    pub seed: u64,
    pub graph: usize,
    pub method: Method,
    pub accuracy: f64,
    pub n_test: usize,
    /// Edge homophily actually realized by the generated graph.
    pub measured_homophily: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub h: f64,
    pub method: Method,
    /// Mean over seeds of the per-seed mean graph accuracy.
    pub mean_accuracy: f64,
    /// Sample standard deviation of the per-seed means.
    pub std_accuracy: f64,
    pub n_graphs: usize,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
    pub graphs: Vec<GraphLog>,
}

impl SweepReport {
    /// Rebuilds the summary rows from the per-graph logs.
    pub fn aggregate(cfg: &SweepConfig, graphs: &[GraphLog]) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for &h in &cfg.h_levels {
            for &method in &cfg.methods {
                let per_seed: Vec<f64> = cfg
                    .seeds
                    .iter()
                    .map(|&s| {
                        let accs: Vec<f64> = graphs
                            .iter()
                            .filter(|g| g.h == h && g.method == method && g.seed == s)
                            .map(|g| g.accuracy)
                            .collect();
                        mean_std(&accs).0
                    })
                    .collect();
                let (mean_accuracy, std_accuracy) = mean_std(&per_seed);
                rows.push(SweepRow {
                    h,
                    method,
                    mean_accuracy,
                    std_accuracy,
                    n_graphs: cfg.graphs_per_level,
                    n_seeds: cfg.seeds.len(),
                });
            }
        }
        rows
    }

    pub fn row(&self, h: f64, method: Method) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.h == h && r.method == method)
    }

    /// Max minus min mean accuracy across levels.
    pub fn gap(&self, method: Method) -> f64 {
        let accs: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(|r| r.mean_accuracy).collect();
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Tab-separated plot data: one line per (h, method).
    pub fn plot_table(&self) -> String {
        let mut out = String::from("h\tmethod\tmean_accuracy\tstd_accuracy\tn_graphs\tn_seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.h,
                r.method.name(),
                r.mean_accuracy,
                r.std_accuracy,
                r.n_graphs,
                r.n_seeds
            );
        }
        out
    }

    /// Per-graph logs as tab-separated text.
    pub fn graph_table(&self) -> String {
        let mut out = String::from("h\tseed\tgraph\tmethod\taccuracy\tn_test\tmeasured_homophily\n");
        for g in &self.graphs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                g.h,
                g.seed,
                g.graph,
                g.method.name(),
                g.accuracy,
                g.n_test,
                g.measured_homophily
            );
        }
        out
    }
}

fn run_method(
    method: Method,
    task: &Task,
    cfg: &SweepConfig,
    model: Option<(&ModelParams, &ModelConfig)>,
    inference_seed: u64,
) -> Result<Vec<usize>, HarnessError> {
    let g = &task.graph;
    let labels = task.train_labels();
    let input = GraphInput {
        x: &g.x,
        edges: &g.edges,
        train_ids: &task.train_ids,
        train_labels: &labels,
        test_ids: &task.test_ids,
    };
    let closed = |filter| -> Result<Vec<usize>, HarnessError> {
        Ok(closed_form_classify(&input, &ClosedFormConfig { filter, ..cfg.closed_form.clone() })?.labels)
    };
    match method {
        Method::Nodepfn => {
            let (params, mcfg) =
                model.ok_or_else(|| HarnessError::Validation("nodepfn requested without a checkpoint".into()))?;
            let icfg = InferenceConfig { seed: inference_seed, ..cfg.inference.clone() };
            Ok(predict(&input, params, mcfg, &icfg)?.argmax_labels())
        }
        Method::Labelprop => Ok(label_propagation(&input, &cfg.label_prop)?.argmax_labels()),
        Method::Linear => closed(FilterMatrix::Identity),
        Method::Sgc => {
            let k = match cfg.closed_form.filter {
                FilterMatrix::LowPass { k } => k,
                _ => 2,
            };
            closed(FilterMatrix::LowPass { k })
        }
        Method::Hgc => closed(FilterMatrix::HighPass),
        Method::Majority => Ok(majority_predict(&labels, task.test_ids.len())),
    }
}

/// Generates fresh cSBM tasks at every homophily level and scores each
/// method on them; graphs are evaluated in parallel with per-graph seeds.
pub fn sweep_homophily(
    model: Option<(&ModelParams, &ModelConfig)>,
    cfg: &SweepConfig,
) -> Result<SweepReport, HarnessError> {
    cfg.validate()?;
    if cfg.methods.contains(&Method::Nodepfn) && model.is_none() {
        return Err(HarnessError::Validation("nodepfn requested without a checkpoint".into()));
    }
    let jobs: Vec<(u64, usize, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.h_levels.len()).flat_map(move |l| (0..cfg.graphs_per_level).map(move |g| (s, l, g))))
        .collect();
    let per_job: Vec<Vec<GraphLog>> = jobs
        .par_iter()
        .map(|&(seed, level, graph)| {
            let h = cfg.h_levels[level];
            let tseed = SweepConfig::task_seed(seed, level, graph);
            let task = cfg.level_prior(h).sample_task(tseed)?;
            let truth = task.test_labels();
            let measured_homophily = task.graph.edge_homophily().unwrap_or(f64::NAN);
            cfg.methods
                .iter()
                .map(|&method| {
                    let pred = run_method(method, &task, cfg, model, derive_seed(&[tseed, 1]))?;
                    Ok(GraphLog {
                        h,
                        seed,
                        graph,
                        method,
                        accuracy: accuracy(&pred, &truth),
                        n_test: truth.len(),
                        measured_homophily,
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()
        })
        .collect::<Result<_, _>>()?;
    let graphs: Vec<GraphLog> = per_job.into_iter().flatten().collect();
    let rows = SweepReport::aggregate(cfg, &graphs);
    Ok(SweepReport { config: cfg.clone(), rows, graphs })
}
