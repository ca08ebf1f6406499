//! Summary statistics of the synthetic prior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{assemble_task_with_info, PriorConfig, PriorError, StructureInfo};
use crate::graph::edge_homophily;
use crate::rng::{derive_seed, rng_from_seed};

/// One fixed-width histogram over `[lo, hi)`; values at `hi` land in the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins] }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let idx = (t.max(0.0) as usize).min(bins - 1);
        self.counts[idx] += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub n_tasks: usize,
    pub mean_edges: f64,
    pub mean_classes: f64,
    pub mean_features: f64,
    pub mean_homophily: f64,
    pub er_graphs: usize,
    pub csbm_graphs: usize,
    pub ba_graphs: usize,
    pub edge_histogram: Histogram,
    /// `class_histogram[c]` counts graphs with `c` classes.
    pub class_histogram: Vec<usize>,
    pub homophily_histogram: Histogram,
}

struct Sample {
    edges: usize,
    classes: usize,
    features: usize,
    homophily: Option<f64>,
    structure: StructureInfo,
}

/// Draws `n_tasks` tasks with seeds derived from `seed` and summarizes them.
pub fn collect_prior_stats(cfg: &PriorConfig, n_tasks: usize, seed: u64) -> Result<PriorStats, PriorError> {
    cfg.validate()?;
    let samples: Vec<Sample> = (0..n_tasks as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(&[seed, i]));
            let (task, info) = assemble_task_with_info(cfg, &mut rng)?;
            let g = &task.graph;
            let classes = {
                let mut seen = vec![false; g.n_classes];
                g.y.iter().for_each(|&c| seen[c] = true);
                seen.iter().filter(|&&s| s).count()
            };
            Ok(Sample {
                edges: g.edges.len(),
                classes,
                features: g.x.cols,
                homophily: edge_homophily(&g.edges, &g.y).ok(),
                structure: info.structure,
            })
        })
        .collect::<Result<_, PriorError>>()?;

    let n = samples.len().max(1) as f64;
    let max_edges = samples.iter().map(|s| s.edges).max().unwrap_or(0) as f64;
    let mut edge_histogram = Histogram::new(0.0, max_edges.max(1.0), 20);
    let mut homophily_histogram = Histogram::new(0.0, 1.0, 10);
    let mut class_histogram = vec![0; cfg.max_classes + 1];
    let (mut er, mut csbm, mut ba) = (0, 0, 0);
    let mut hom_sum = 0.0;
    let mut hom_n = 0usize;
    for s in &samples {
        edge_histogram.add(s.edges as f64);
        class_histogram[s.classes] += 1;
        if let Some(h) = s.homophily {
            homophily_histogram.add(h);
            hom_sum += h;
            hom_n += 1;
        }
        match s.structure {
            StructureInfo::Er { .. } => er += 1,
            StructureInfo::Csbm { .. } => csbm += 1,
            StructureInfo::Ba { .. } => ba += 1,
        }
    }
    Ok(PriorStats {
        n_tasks: samples.len(),
        mean_edges: samples.iter().map(|s| s.edges as f64).sum::<f64>() / n,
        mean_classes: samples.iter().map(|s| s.classes as f64).sum::<f64>() / n,
        mean_features: samples.iter().map(|s| s.features as f64).sum::<f64>() / n,
        mean_homophily: if hom_n > 0 { hom_sum / hom_n as f64 } else { f64::NAN },
        er_graphs: er,
        csbm_graphs: csbm,
        ba_graphs: ba,
        edge_histogram,
        class_histogram,
        homophily_histogram,
    })
}

/// Mean measured edge homophily of cSBM graphs at each fixed `h`, with
/// labels from the SCM prior and `p_in` drawn from the config's range.
/// Graph `i` uses the same seed at every level, so labels and `p_in` are
/// shared and only `h` varies along the curve.
pub fn csbm_homophily_curve(
    cfg: &PriorConfig,
    h_levels: &[f64],
    graphs_per_level: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>, PriorError> {
    h_levels
        .iter()
        .map(|&h| {
            let level_cfg = PriorConfig {
                er_fraction: 0.0,
                min_classes: cfg.min_classes.max(2),
                csbm: super::CsbmPrior { h_range: (h, h), ..cfg.csbm.clone() },
                ba: super::BaPrior { enabled: false, ..cfg.ba.clone() },
                ..cfg.clone()
            };
            let vals: Vec<f64> = (0..graphs_per_level as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng_from_seed(derive_seed(&[seed, i]));
                    let (t, _) = assemble_task_with_info(&level_cfg, &mut rng)?;
                    Ok(edge_homophily(&t.graph.edges, &t.graph.y).ok())
                })
                .collect::<Result<Vec<Option<f64>>, PriorError>>()?
                .into_iter()
                .flatten()
                .collect();
            Ok((h, vals.iter().sum::<f64>() / vals.len().max(1) as f64))
        })
        .collect()
}
