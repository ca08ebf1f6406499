//! Acceptance suite. Runs every criterion in sequence (timing checks need a
//! quiet machine) and prints one PASS/FAIL line per criterion.
//!
//! `NODEPFN_ACCEPTANCE=4,7` restricts a local run to the listed criteria.

use std::io::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use nodepfn::baselines::oracle::{exact_ppd, total_variation, OraclePrior};
use nodepfn::baselines::{
    closed_form_classify, label_propagation, ClosedFormConfig, FilterMatrix, LabelPropConfig, Solver,
};
use nodepfn::graph::{Graph, Task};
use nodepfn::harness::{
    fit_exponent, measure_scaling, sweep_homophily, Method, ScalingBranch, SweepConfig,
};
use nodepfn::inference::{predict, GraphInput, InferenceConfig};
use nodepfn::io::{Checkpoint, DatasetFile};
use nodepfn::linalg::Matrix;
use nodepfn::numerics::Real;
use nodepfn::model::{forward, restricted_softmax, ForwardMode, ModelConfig, ModelParams, PreparedTask};
use nodepfn::prior::stats::{collect_prior_stats, csbm_homophily_curve};
use nodepfn::prior::{PriorConfig, TaskSampler};
use nodepfn::rng::{derive_seed, rng_from_seed};
use nodepfn::training::{task_gradients, task_loss_value, TrainConfig, Trainer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn train(model: &ModelConfig, prior: &PriorConfig, steps: u64, batch: usize, seed: u64) -> ModelParams {
    let model = ModelConfig { init_seed: seed, ..model.clone() };
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: steps,
        batch_size: batch,
        learning_rate: 1e-3,
        seed,
        validation_tasks: 0,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(model, cfg, prior.clone()).unwrap();
    tr.run(None, |_, _| Ok(())).unwrap();
    tr.params
}

// 1 ---------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let prior = PriorConfig { n_nodes: 12, ..PriorConfig::desk() };
    let model = ModelConfig { init_seed: 3, ..ModelConfig::desk() };
    let task = prior.sample_task(5).unwrap();
    let prepared = PreparedTask::from_task(&task, &model).unwrap();
    let params = ModelParams::init(&model).unwrap();
    let (_, grads) = task_gradients(&params, &model, &prepared, ForwardMode::Eval).unwrap();
    let g = grads.flatten();
    let base = params.flatten();

    let mut rng = rng_from_seed(17);
    let live: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-8).collect();
    let mut coords: Vec<usize> = live.choose_multiple(&mut rng, 60).copied().collect();
    coords.extend((0..20).map(|_| rng.random_range(0..g.len())));

    let eps: f64 = 1e-5;
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = base.clone();
        plus[i] += eps as Real;
        let mut minus = base.clone();
        minus[i] -= eps as Real;
        let lp = task_loss_value(&params.unflatten(&plus), &model, &prepared).unwrap();
        let lm = task_loss_value(&params.unflatten(&minus), &model, &prepared).unwrap();
        let fd = (lp - lm) / (2.0 * eps);
        let a = g[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    check(
        coords.len() >= 50 && worst < 1e-3,
        format!("{} coordinates, worst relative error {worst:.2e}", coords.len()),
    )
}

// 2 ---------------------------------------------------------------------

fn permutation_equivariance() -> Outcome {
    let prior = PriorConfig { n_nodes: 40, ..PriorConfig::desk() };
    let mut worst = 0.0f64;
    for t in 0..20u64 {
        let model = ModelConfig { init_seed: t, ..ModelConfig::desk() };
        let params = ModelParams::init(&model).unwrap();
        let task = prior.sample_task(derive_seed(&[200, t])).unwrap();
        let mut perm: Vec<usize> = (0..task.graph.n).collect();
        perm.shuffle(&mut rng_from_seed(t));
        let permuted = task.permute_nodes(&perm);
        let a = forward(&params, &PreparedTask::from_task(&task, &model).unwrap(), &model).unwrap();
        let b = forward(&params, &PreparedTask::from_task(&permuted, &model).unwrap(), &model).unwrap();
        let d = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    check(worst < 1e-5, format!("20 tasks, max logit difference {worst:.2e}"))
}

// 3 ---------------------------------------------------------------------

fn drop_nodes(task: &Task, removed: &[usize]) -> Task {
    let g = &task.graph;
    let mut new_id = vec![usize::MAX; g.n];
    let mut next = 0;
    for v in 0..g.n {
        if !removed.contains(&v) {
            new_id[v] = next;
            next += 1;
        }
    }
    let keep: Vec<usize> = (0..g.n).filter(|v| !removed.contains(v)).collect();
    let x = g.x.select_rows(&keep);
    let y = keep.iter().map(|&v| g.y[v]).collect();
    let edges = g
        .edges
        .iter()
        .filter(|(i, j)| new_id[*i] != usize::MAX && new_id[*j] != usize::MAX)
        .map(|&(i, j)| (new_id[i], new_id[j]))
        .collect();
    let graph = Graph::new(edges, x, y, g.n_classes).unwrap();
    let remap = |ids: &[usize]| ids.iter().filter(|v| !removed.contains(v)).map(|&v| new_id[v]).collect();
    Task::new(graph, remap(&task.train_ids), remap(&task.test_ids)).unwrap()
}

fn context_query_asymmetry() -> Outcome {
    let prior = PriorConfig { n_nodes: 60, ..PriorConfig::desk() };
    let model = ModelConfig { mpnn_enabled: false, ..ModelConfig::desk() };
    let params = ModelParams::init(&model).unwrap();
    let mut worst = 0.0f64;
    for t in 0..10u64 {
        let task = prior.sample_task(derive_seed(&[300, t])).unwrap();
        let mut rng = rng_from_seed(t);
        let k = rng.random_range(1..task.test_ids.len());
        let removed: Vec<usize> = task.test_ids.choose_multiple(&mut rng, k).copied().collect();
        let full = forward(&params, &PreparedTask::from_task(&task, &model).unwrap(), &model).unwrap();
        let small = forward(&params, &PreparedTask::from_task(&drop_nodes(&task, &removed), &model).unwrap(), &model).unwrap();
        let w = model.max_classes;
        let kept = task.test_ids.iter().enumerate().filter(|(_, v)| !removed.contains(v)).map(|(r, _)| r);
        for (r_small, r_full) in kept.enumerate() {
            for c in 0..w {
                let d = (full.data()[r_full * w + c] as f64 - small.data()[r_small * w + c] as f64).abs();
                worst = worst.max(d);
            }
        }
    }
    check(worst < 1e-6, format!("10 tasks, max change in remaining logits {worst:.2e}"))
}

// 4 ---------------------------------------------------------------------

fn oracle_convergence() -> Outcome {
    let prior = OraclePrior::small_csbm_pair();
    let model = ModelConfig { d_feat_max: 4, max_classes: 2, ..ModelConfig::desk() };
    let steps = 4000;
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: steps,
        batch_size: 16,
        learning_rate: 1e-3,
        validation_tasks: 0,
        validate_every: 0,
        ..TrainConfig::default()
    };
    let held: Vec<Task> = (0..200u64).map(|i| prior.sample_task(1_000_000 + i).unwrap()).collect();
    let exact: Vec<Matrix> = held.iter().map(|t| exact_ppd(t, &prior.hypotheses).unwrap().probs).collect();
    let mean_tv = |params: &ModelParams| {
        let mut total = 0.0;
        for (t, ex) in held.iter().zip(&exact) {
            let logits = forward(params, &PreparedTask::from_task(t, &model).unwrap(), &model).unwrap();
            let p = restricted_softmax(&logits, 2).unwrap().to_f64();
            let s: f64 = (0..ex.rows).map(|r| total_variation(ex.row(r), &p[r * 2..r * 2 + 2])).sum();
            total += s / ex.rows as f64;
        }
        total / held.len() as f64
    };
    let marks = [steps / 4, steps / 2, steps];
    let mut tvs = Vec::new();
    let mut tr = Trainer::new(model.clone(), cfg, prior.clone()).unwrap();
    tr.run(None, |tr, rec| {
        if marks.contains(&rec.step) {
            tvs.push(mean_tv(&tr.params));
        }
        Ok(())
    })
    .unwrap();
    let decreasing = tvs.windows(2).all(|w| w[1] < w[0]);
    check(
        tvs.len() == 3 && tvs[2] <= 0.08 && decreasing,
        format!("mean TV at 25/50/100%: {:.4} / {:.4} / {:.4}", tvs[0], tvs[1], tvs[2]),
    )
}

// 5 and 10 share the desk model trained on seed 0 ---------------------------

const DESK_STEPS: u64 = 1000;
const DESK_BATCH: usize = 8;

fn homophily_sweep(desk: &ModelParams) -> Outcome {
    let model = ModelConfig::desk();
    let cfg = SweepConfig {
        graphs_per_level: 10,
        methods: vec![Method::Nodepfn, Method::Labelprop, Method::Majority],
        inference: InferenceConfig { ensemble_size: 4, ..InferenceConfig::default() },
        ..SweepConfig::default()
    };
    let report = sweep_homophily(Some((desk, &model)), &cfg).unwrap();
    let margin = cfg
        .h_levels
        .iter()
        .map(|&h| report.row(h, Method::Nodepfn).unwrap().mean_accuracy - report.row(h, Method::Majority).unwrap().mean_accuracy)
        .fold(f64::INFINITY, f64::min);
    let (gap, lp_gap) = (report.gap(Method::Nodepfn), report.gap(Method::Labelprop));
    check(
        margin >= 0.10 && gap < lp_gap,
        format!(
            "{} training tasks; min margin over majority {:.3}; gap {gap:.3} vs label propagation {lp_gap:.3}",
            DESK_STEPS as usize * DESK_BATCH,
            margin
        ),
    )
}

fn ablation_direction(desk: &ModelParams) -> Outcome {
    let full_cfg = ModelConfig::desk();
    let ablated_cfg = ModelConfig { mpnn_enabled: false, ..ModelConfig::desk() };
    let er_only = PriorConfig { er_fraction: 1.0, ..PriorConfig::desk() };
    let eval_prior = SweepConfig::default().level_prior(0.9);
    let tasks: Vec<Task> = (0..40u64).map(|i| eval_prior.sample_task(derive_seed(&[1000, i])).unwrap()).collect();
    let icfg = InferenceConfig { ensemble_size: 4, ..InferenceConfig::default() };
    let accuracy = |params: &ModelParams, cfg: &ModelConfig| {
        let mut total = 0.0;
        for t in &tasks {
            let g = &t.graph;
            let labels = t.train_labels();
            let input = GraphInput { x: &g.x, edges: &g.edges, train_ids: &t.train_ids, train_labels: &labels, test_ids: &t.test_ids };
            let pred = predict(&input, params, cfg, &icfg).unwrap().argmax_labels();
            let truth = t.test_labels();
            total += pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        }
        total / tasks.len() as f64
    };
    let mut full = Vec::new();
    let mut ablated = Vec::new();
    for seed in 0..3u64 {
        let p = if seed == 0 { desk.clone() } else { train(&full_cfg, &PriorConfig::desk(), DESK_STEPS, DESK_BATCH, seed) };
        full.push(accuracy(&p, &full_cfg));
        let q = train(&ablated_cfg, &er_only, DESK_STEPS, DESK_BATCH, seed);
        ablated.push(accuracy(&q, &ablated_cfg));
    }
    let (f, a) = (full.iter().sum::<f64>() / 3.0, ablated.iter().sum::<f64>() / 3.0);
    check(f - a >= 0.03, format!("h=0.9 accuracy: full {f:.3}, ablated {a:.3} (margin {:.3})", f - a))
}

// 6 ---------------------------------------------------------------------

fn prior_statistics() -> Outcome {
    let cfg = PriorConfig::default();
    let stats = collect_prior_stats(&cfg, 10_000, 6).unwrap();
    let edges_ok = (stats.mean_edges - 12_706.4).abs() <= 0.25 * 12_706.4;
    let classes_ok = (stats.mean_classes - 8.79).abs() <= 1.5;
    let levels: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let curve = csbm_homophily_curve(&cfg, &levels, 150, 6).unwrap();
    let monotone = curve.windows(2).all(|w| w[1].1 > w[0].1);
    check(
        edges_ok && classes_ok && monotone,
        format!(
            "mean edges {:.1}, mean classes {:.2}, homophily curve {}",
            stats.mean_edges,
            stats.mean_classes,
            curve.iter().map(|(_, m)| format!("{m:.3}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// 7 ---------------------------------------------------------------------

fn complexity_scaling() -> Outcome {
    let model = ModelConfig { n_layers: 1, ..ModelConfig::desk() };
    let params = ModelParams::init(&model).unwrap();
    let attn = measure_scaling(&params, &model, ScalingBranch::Attention, &[2896, 4096, 5793, 8192], 5, 0).unwrap();
    let mpnn =
        measure_scaling(&params, &model, ScalingBranch::Mpnn { n_nodes: 8192 }, &[1 << 21, 1 << 22, 1 << 23], 5, 0).unwrap();
    let (ea, em) = (fit_exponent(&attn), fit_exponent(&mpnn));
    check(
        (ea - 2.0).abs() <= 0.3 && (em - 1.0).abs() <= 0.3,
        format!("attention exponent in N {ea:.3}, message-passing exponent in E {em:.3}"),
    )
}

// 8 ---------------------------------------------------------------------

fn dense_normalized(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| if a[(i, j)] > 0.0 { 1.0 / (d[i] * d[j]).sqrt() } else { 0.0 })
}

fn dense_label_prop(a: &DMatrix<f64>, train: &[usize], labels: &[usize], c: usize, alpha: f64, iters: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = DMatrix::zeros(n, c);
    for (&v, &k) in train.iter().zip(labels) {
        y[(v, k)] = 1.0;
    }
    let mut f = y.clone();
    for _ in 0..iters {
        f = a * &f * alpha + &y * (1.0 - alpha);
        for &v in train {
            f.set_row(v, &y.row(v));
        }
    }
    f
}

fn baseline_goldens() -> Outcome {
    let mut worst = 0.0f64;
    let mut argmax_ok = true;

    // label propagation on a 4-node path and on a 9-node graph
    let lp_cases: [(usize, Vec<(usize, usize)>, Vec<usize>, Vec<usize>); 2] = [
        (4, vec![(0, 1), (1, 2), (2, 3)], vec![0, 3], vec![0, 1]),
        (
            9,
            vec![(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (3, 8), (1, 6)],
            vec![0, 4, 7],
            vec![0, 1, 2],
        ),
    ];
    for (n, edges, train, labels) in &lp_cases {
        let x = Matrix::zeros(*n, 1);
        let test: Vec<usize> = (0..*n).filter(|v| !train.contains(v)).collect();
        let input = GraphInput { x: &x, edges, train_ids: train, train_labels: labels, test_ids: &test };
        let ppd = label_propagation(&input, &LabelPropConfig { iters: 20, tol: 0.0, ..LabelPropConfig::default() }).unwrap();
        let c = labels.len();
        let f = dense_label_prop(&dense_normalized(*n, edges), train, labels, c, 0.9, 20);
        for (r, &v) in test.iter().enumerate() {
            let s: f64 = f.row(v).sum();
            let mut best = 0;
            for k in 0..c {
                worst = worst.max((ppd.probs.get(r, k) - f[(v, k)] / s).abs());
                if f[(v, k)] > f[(v, best)] {
                    best = k;
                }
            }
            argmax_ok &= ppd.argmax_labels()[r] == best;
        }
    }
    // path ends labeled differently: inner nodes follow the nearer end
    {
        let x = Matrix::zeros(4, 1);
        let input = GraphInput { x: &x, edges: &[(0, 1), (1, 2), (2, 3)], train_ids: &[0, 3], train_labels: &[0, 1], test_ids: &[1, 2] };
        let ppd = label_propagation(&input, &LabelPropConfig { iters: 20, tol: 0.0, ..LabelPropConfig::default() }).unwrap();
        argmax_ok &= ppd.argmax_labels() == vec![0, 1];
    }
    // disconnected components take their own seed label
    {
        let x = Matrix::zeros(6, 1);
        let input = GraphInput {
            x: &x,
            edges: &[(0, 1), (1, 2), (3, 4), (4, 5)],
            train_ids: &[0, 5],
            train_labels: &[1, 0],
            test_ids: &[1, 2, 3, 4],
        };
        argmax_ok &= label_propagation(&input, &LabelPropConfig::default()).unwrap().argmax_labels() == vec![1, 1, 0, 0];
    }

    // closed form on a 6-node instance against a dense normal-equation solve
    let x = Matrix::from_vec(6, 2, vec![0.3, -1.2, 1.1, 0.4, -0.7, 0.9, 2.0, -0.5, 0.1, 0.2, -1.4, 1.6]);
    let edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5)];
    let (train, labels, test) = ([0usize, 2, 3, 5], [0usize, 1, 1, 0], [1usize, 4]);
    let input = GraphInput { x: &x, edges: &edges, train_ids: &train, train_labels: &labels, test_ids: &test };
    let a = dense_normalized(6, &edges);
    let xd = DMatrix::from_row_slice(6, 2, &x.data);
    let eye = DMatrix::<f64>::identity(6, 6);
    for (filter, f) in [
        (FilterMatrix::Identity, xd.clone()),
        (FilterMatrix::LowPass { k: 2 }, &a * &a * &xd),
        (FilterMatrix::HighPass, (&eye - &a) * &xd),
    ] {
        let out = closed_form_classify(&input, &ClosedFormConfig { filter, ridge: 1e-4, solver: Solver::Ridge }).unwrap();
        let ftr = DMatrix::from_fn(4, 2, |r, c| f[(train[r], c)]);
        let y = DMatrix::from_fn(4, 2, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
        let lhs = ftr.transpose() * &ftr + DMatrix::identity(2, 2) * 1e-4;
        let w = lhs.lu().solve(&(ftr.transpose() * y)).unwrap();
        let scores = DMatrix::from_fn(2, 2, |r, c| f[(test[r], c)]) * &w;
        for r in 0..2 {
            for c in 0..2 {
                worst = worst.max((out.scores.get(r, c) - scores[(r, c)]).abs());
                worst = worst.max((out.weights.get(r, c) - w[(r, c)]).abs());
            }
            argmax_ok &= out.labels[r] == usize::from(scores[(r, 1)] > scores[(r, 0)]);
        }
    }
    // identity filter on separable 1-D data fits the training set
    {
        let x = Matrix::from_vec(6, 2, vec![-3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0]);
        let ids = [0, 1, 2, 3, 4, 5];
        let labels = [0, 0, 0, 1, 1, 1];
        let input = GraphInput { x: &x, edges: &[], train_ids: &ids, train_labels: &labels, test_ids: &ids };
        let cfg = ClosedFormConfig { filter: FilterMatrix::Identity, ..ClosedFormConfig::default() };
        argmax_ok &= closed_form_classify(&input, &cfg).unwrap().labels == labels;
    }
    // high-pass on constant features is all ties, resolved to class 0
    {
        let x = Matrix::from_vec(5, 1, vec![2.0; 5]);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];
        let input = GraphInput { x: &x, edges: &edges, train_ids: &[0, 1], train_labels: &[0, 1], test_ids: &[2, 3, 4] };
        let cfg = ClosedFormConfig { filter: FilterMatrix::HighPass, ..ClosedFormConfig::default() };
        argmax_ok &= closed_form_classify(&input, &cfg).unwrap().labels == vec![0, 0, 0];
    }
    check(argmax_ok && worst <= 1e-8, format!("argmax {}, max value deviation {worst:.2e}", if argmax_ok { "exact" } else { "mismatch" }))
}

// 9 ---------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig { d_embed: 32, n_layers: 2, ..ModelConfig::desk() };
    let prior = PriorConfig { n_nodes: 48, ..PriorConfig::desk() };
    let cfg = TrainConfig { epochs: 2, steps_per_epoch: 10, batch_size: 4, validation_tasks: 0, validate_every: 0, ..TrainConfig::default() };

    let mut a = Trainer::new(model, cfg.clone(), prior.clone()).unwrap();
    a.run(Some(10), |_, _| Ok(())).unwrap();
    let path = dir.path().join("mid.ckpt");
    a.checkpoint(serde_json::json!({"note": "midpoint"})).save(&path).unwrap();
    let on_disk = std::fs::read(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let ckpt_bytes_ok = loaded.to_bytes() == on_disk;

    let mut b = Trainer::resume(&loaded, cfg, prior.clone()).unwrap();
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    for _ in 0..10 {
        let (x, y) = (a.step().unwrap(), b.step().unwrap());
        ra.push((x.step, x.loss.to_bits(), x.grad_norm.to_bits(), x.lr.to_bits()));
        rb.push((y.step, y.loss.to_bits(), y.grad_norm.to_bits(), y.lr.to_bits()));
    }
    let bits = |p: &ModelParams| p.flatten().iter().map(|v| v.to_bits() as u64).collect::<Vec<_>>();
    let resume_ok = ra == rb && bits(&a.params) == bits(&b.params);

    let task = prior.sample_task(9).unwrap();
    let ds_path = dir.path().join("task.npfn");
    let ds = DatasetFile::from_task(&task);
    ds.save(&ds_path).unwrap();
    let ds_disk = std::fs::read(&ds_path).unwrap();
    let back = DatasetFile::load(&ds_path).unwrap();
    let ds_ok = back == ds && back.to_bytes() == ds_disk;

    check(
        resume_ok && ckpt_bytes_ok && ds_ok,
        format!("resume bitwise {resume_ok}, checkpoint bytes {ckpt_bytes_ok}, dataset bytes {ds_ok}"),
    )
}

// -----------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<u32>> =
        std::env::var("NODEPFN_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|v| v.contains(&k));

    let mut desk: Option<ModelParams> = None;
    let mut desk_model = || desk.get_or_insert_with(|| train(&ModelConfig::desk(), &PriorConfig::desk(), DESK_STEPS, DESK_BATCH, 0)).clone();

    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for k in 1..=10u32 {
        if !wanted(k) {
            continue;
        }
        let start = Instant::now();
        let result = match k {
            1 => gradient_check(),
            2 => permutation_equivariance(),
            3 => context_query_asymmetry(),
            4 => oracle_convergence(),
            5 => homophily_sweep(&desk_model()),
            6 => prior_statistics(),
            7 => complexity_scaling(),
            8 => baseline_goldens(),
            9 => reproducibility(),
            _ => ablation_direction(&desk_model()),
        };
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        // straight to the handle so the line survives output capture
        writeln!(out, "criterion {k:>2}: {tag}  {detail}  [{secs:.1}s]").unwrap();
        out.flush().unwrap();
        if result.is_err() {
            failed.push(k);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
