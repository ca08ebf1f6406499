use nalgebra::DMatrix;
use nodepfn::baselines::oracle::{exact_ppd, total_variation, OraclePrior};
use nodepfn::baselines::{
    closed_form_classify, label_propagation, ClosedFormConfig, FilterMatrix, LabelPropConfig, Solver,
};
use nodepfn::inference::GraphInput;
use nodepfn::linalg::Matrix;
use nodepfn::prior::TaskSampler;
use nodepfn::rng::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;

fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    DMatrix::from_fn(n, n, |i, j| if a[(i, j)] > 0.0 { 1.0 / (d[i] * d[j]).sqrt() } else { 0.0 })
}

fn to_dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

#[test]
fn closed_form_matches_dense_normal_equations() {
    let x = Matrix::from_vec(6, 2, vec![0.3, -1.2, 1.1, 0.4, -0.7, 0.9, 2.0, -0.5, 0.1, 0.2, -1.4, 1.6]);
    let edges = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5)];
    let train = [0, 2, 3, 5];
    let labels = [0, 1, 1, 0];
    let test = [1, 4];
    let input = GraphInput { x: &x, edges: &edges, train_ids: &train, train_labels: &labels, test_ids: &test };
    let a = dense_adjacency(6, &edges);
    let xd = to_dense(&x);
    let eye = DMatrix::<f64>::identity(6, 6);
    for (filter, f) in [
        (FilterMatrix::Identity, xd.clone()),
        (FilterMatrix::LowPass { k: 2 }, &a * &a * &xd),
        (FilterMatrix::HighPass, (&eye - &a) * &xd),
    ] {
        let cfg = ClosedFormConfig { filter, ridge: 1e-4, solver: Solver::Ridge };
        let out = closed_form_classify(&input, &cfg).unwrap();
        let ftr = DMatrix::from_fn(4, 2, |r, c| f[(train[r], c)]);
        let y = DMatrix::from_fn(4, 2, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
        let lhs = ftr.transpose() * &ftr + DMatrix::identity(2, 2) * 1e-4;
        let w = lhs.lu().solve(&(ftr.transpose() * y)).unwrap();
        let fte = DMatrix::from_fn(2, 2, |r, c| f[(test[r], c)]);
        let scores = fte * &w;
        for r in 0..2 {
            for c in 0..2 {
                assert!((out.scores.get(r, c) - scores[(r, c)]).abs() < 1e-8, "{filter:?}");
            }
            let want = if scores[(r, 1)] > scores[(r, 0)] { 1 } else { 0 };
            assert_eq!(out.labels[r], want, "{filter:?}");
        }
    }
}

#[test]
fn pseudo_inverse_matches_dense_pinv() {
    // rank-deficient design: second column is twice the first
    let x = Matrix::from_vec(5, 2, vec![1.0, 2.0, -1.0, -2.0, 0.5, 1.0, 2.0, 4.0, -0.3, -0.6]);
    let train = [0, 1, 2, 3];
    let labels = [0, 1, 0, 1];
    let test = [4];
    let input = GraphInput { x: &x, edges: &[], train_ids: &train, train_labels: &labels, test_ids: &test };
    let cfg = ClosedFormConfig { filter: FilterMatrix::Identity, ridge: 0.0, solver: Solver::PseudoInverse };
    let out = closed_form_classify(&input, &cfg).unwrap();
    let ftr = DMatrix::from_fn(4, 2, |r, c| x.get(train[r], c));
    let y = DMatrix::from_fn(4, 2, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
    let w = ftr.clone().pseudo_inverse(1e-12).unwrap() * y;
    for r in 0..2 {
        for c in 0..2 {
            assert!((out.weights.get(r, c) - w[(r, c)]).abs() < 1e-8);
        }
    }
}

#[test]
fn label_propagation_matches_dense_iteration() {
    let n = 9;
    let edges = [(0, 1), (0, 3), (1, 2), (2, 5), (3, 4), (4, 5), (4, 7), (5, 8), (6, 7), (7, 8)];
    let train = [0, 8, 6];
    let labels = [2, 0, 0];
    let test = [1, 2, 3, 4, 5, 7];
    let x = Matrix::zeros(n, 1);
    let input = GraphInput { x: &x, edges: &edges, train_ids: &train, train_labels: &labels, test_ids: &test };
    let cfg = LabelPropConfig { alpha: 0.9, iters: 50, tol: 0.0 };
    let ppd = label_propagation(&input, &cfg).unwrap();
    assert_eq!(ppd.classes, vec![0, 2]);
    let a = dense_adjacency(n, &edges);
    let mut y = DMatrix::zeros(n, 2);
    y[(0, 1)] = 1.0;
    y[(8, 0)] = 1.0;
    y[(6, 0)] = 1.0;
    let mut f = y.clone();
    for _ in 0..50 {
        f = &a * &f * 0.9 + &y * 0.1;
        for &v in &train {
            f.set_row(v, &y.row(v));
        }
    }
    for (r, &v) in test.iter().enumerate() {
        let s = f.row(v).sum();
        for c in 0..2 {
            assert!((ppd.probs.get(r, c) - f[(v, c)] / s).abs() < 1e-8);
        }
    }
}

/// Self-normalized importance sampling: draw (hypothesis, test labels) from
/// the prior and weight by the likelihood of everything observed.
fn monte_carlo_ppd(prior: &OraclePrior, task: &nodepfn::graph::Task, samples: usize, seed: u64) -> Vec<[f64; 2]> {
    let g = &task.graph;
    let n = g.n;
    let mut adj = vec![vec![false; n]; n];
    for &(i, j) in &g.edges {
        adj[i][j] = true;
        adj[j][i] = true;
    }
    let hyps = prior.hypotheses.hypotheses();
    let mut rng = rng_from_seed(seed);
    let mut acc = vec![[0.0f64; 2]; task.test_ids.len()];
    let mut total = 0.0;
    let mut labels = g.y.clone();
    for _ in 0..samples {
        let h = &hyps[if rng.random::<f64>() < hyps[0].weight { 0 } else { 1 }];
        for &v in &task.test_ids {
            labels[v] = rng.random_range(0..2);
        }
        let mut ll = 0.0;
        for v in 0..n {
            if task.train_ids.contains(&v) {
                ll += 0.5f64.ln();
            }
            for d in 0..g.x.cols {
                let z = (g.x.get(v, d) - h.feature_means.get(labels[v], d)) / h.feature_std;
                ll -= 0.5 * z * z;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let p = h.block_probs.get(labels[i], labels[j]);
                ll += if adj[i][j] { p.ln() } else { (1.0 - p).ln() };
            }
        }
        let w = ll.exp();
        total += w;
        for (r, &v) in task.test_ids.iter().enumerate() {
            acc[r][labels[v]] += w;
        }
    }
    acc.iter().map(|a| [a[0] / total, a[1] / total]).collect()
}

#[test]
fn exact_ppd_agrees_with_monte_carlo() {
    let prior = OraclePrior::small_csbm_pair();
    for seed in [11, 12] {
        let task = prior.sample_task(seed).unwrap();
        let exact = exact_ppd(&task, &prior.hypotheses).unwrap();
        let mc = monte_carlo_ppd(&prior, &task, 1_000_000, seed + 100);
        for (r, row) in mc.iter().enumerate() {
            let tv = total_variation(exact.probs.row(r), row);
            assert!(tv < 0.01, "seed {seed} node {r}: tv {tv}");
        }
    }
}

#[test]
fn oracle_prior_draws_both_hypotheses() {
    let prior = OraclePrior::small_csbm_pair();
    let picks: Vec<usize> = (0..400).map(|s| prior.sample_with_hypothesis(s).unwrap().1).collect();
    let ones = picks.iter().filter(|&&w| w == 1).count();
    assert!((150..250).contains(&ones), "{ones}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_ignores_train_order(seed in 0u64..10_000, rot in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let n = 12;
        let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        edges.push((0, n - 1));
        let train: Vec<usize> = (0..6).collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let test: Vec<usize> = (6..n).collect();
        let cfg = ClosedFormConfig::default();
        let a = closed_form_classify(&GraphInput { x: &x, edges: &edges, train_ids: &train, train_labels: &labels, test_ids: &test }, &cfg).unwrap();
        let mut t2 = train.clone();
        let mut l2 = labels.clone();
        t2.rotate_left(rot);
        l2.rotate_left(rot);
        let b = closed_form_classify(&GraphInput { x: &x, edges: &edges, train_ids: &t2, train_labels: &l2, test_ids: &test }, &cfg).unwrap();
        prop_assert_eq!(a.labels, b.labels);
        prop_assert!(a.scores.max_abs_diff(&b.scores) < 1e-9);
    }

    #[test]
    fn label_propagation_rows_are_distributions(seed in 0u64..10_000) {
        let mut rng = rng_from_seed(seed);
        let n = 15;
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|_| rng.random::<f64>() < 0.2).collect();
        let x = Matrix::zeros(n, 1);
        let train = [0, 1, 2, 3];
        let labels = [0, 1, 0, 2];
        let test: Vec<usize> = (4..n).collect();
        let ppd = label_propagation(&GraphInput { x: &x, edges: &edges, train_ids: &train, train_labels: &labels, test_ids: &test }, &LabelPropConfig::default()).unwrap();
        for r in 0..ppd.probs.rows {
            prop_assert!((ppd.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(ppd.probs.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
