//! Random graph structure: contextual SBM, Erdős–Rényi, Barabási–Albert.
//!
//! Independent-edge models are sampled by geometric skipping over the pair
//! index space of each block, so the cost is proportional to the number of
//! edges drawn rather than to n².

use rand::Rng as _;

use super::PriorError;
use crate::graph::canonicalize_edges;
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Draw from the power-function law with density `a·x^(a−1)` on [0, 1].
pub fn sample_power(a: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.random();
    u.powf(1.0 / a)
}

/// Visits the indices in `0..count` kept by independent Bernoulli(p) trials.
fn bernoulli_indices(count: u64, p: f64, rng: &mut Rng, mut keep: impl FnMut(u64)) {
    if count == 0 || p <= 0.0 {
        return;
    }
    if p >= 1.0 {
        (0..count).for_each(keep);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut idx: u64 = 0;
    loop {
        // number of failures before the next success
        let u: f64 = 1.0 - rng.random::<f64>();
        let skip = (u.ln() / log_q).floor();
        if !skip.is_finite() || skip >= (count - idx) as f64 {
            return;
        }
        idx += skip as u64;
        keep(idx);
        idx += 1;
        if idx >= count {
            return;
        }
    }
}

/// Adds edges between every pair inside `members` with probability `p`.
fn sample_within(members: &[usize], p: f64, rng: &mut Rng, out: &mut Vec<(usize, usize)>) {
    let s = members.len() as u64;
    if s < 2 {
        return;
    }
    let total = s * (s - 1) / 2;
    // row i holds pairs (i, j) for j in i+1..s, starting at offset(i)
    let mut row: u64 = 0;
    let mut row_start: u64 = 0;
    bernoulli_indices(total, p, rng, |k| {
        while k >= row_start + (s - 1 - row) {
            row_start += s - 1 - row;
            row += 1;
        }
        let col = row + 1 + (k - row_start);
        out.push((members[row as usize], members[col as usize]));
    });
}

/// Adds edges between every pair across `a` × `b` with probability `p`.
fn sample_across(a: &[usize], b: &[usize], p: f64, rng: &mut Rng, out: &mut Vec<(usize, usize)>) {
    let nb = b.len() as u64;
    bernoulli_indices(a.len() as u64 * nb, p, rng, |k| {
        out.push((a[(k / nb) as usize], b[(k % nb) as usize]));
    });
}

/// Block-probability matrix of the contextual SBM.
///
/// `p_out = p_in·(1−h)`; off-diagonal blocks get `Power(5)·p_out`, diagonal
/// blocks `p_out + Power(2)·(p_in − p_out)`. The matrix is symmetric.
pub fn csbm_block_probs(n_classes: usize, h: f64, p_in: f64, rng: &mut Rng) -> Result<Matrix, PriorError> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(PriorError::Config(format!("homophily {h} outside (0, 1]")));
    }
    if !(p_in > 0.0 && p_in < 1.0) {
        return Err(PriorError::Config(format!("p_in {p_in} outside (0, 1)")));
    }
    let p_out = csbm_p_out(p_in, h);
    let mut probs = Matrix::zeros(n_classes, n_classes);
    for a in 0..n_classes {
        for b in a..n_classes {
            let p = if a == b {
                p_out + sample_power(2.0, rng) * (p_in - p_out)
            } else {
                sample_power(5.0, rng) * p_out
            };
            probs.set(a, b, p);
            probs.set(b, a, p);
        }
    }
    Ok(probs)
}

pub fn csbm_p_out(p_in: f64, h: f64) -> f64 {
    p_in * (1.0 - h)
}

/// Samples an undirected graph whose communities are the labels, with one
/// edge probability per (unordered) pair of communities.
pub fn sample_sbm_edges(labels: &[usize], probs: &Matrix, rng: &mut Rng) -> Vec<(usize, usize)> {
    let k = probs.rows;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (v, &c) in labels.iter().enumerate() {
        members[c].push(v);
    }
    let mut edges = Vec::new();
    for a in 0..k {
        for b in a..k {
            let p = probs.get(a, b);
            if a == b {
                sample_within(&members[a], p, rng, &mut edges);
            } else {
                sample_across(&members[a], &members[b], p, rng, &mut edges);
            }
        }
    }
    canonicalize_edges(edges)
}

/// Contextual SBM edges for the given labels at homophily `h`.
pub fn sample_csbm_edges(labels: &[usize], h: f64, p_in: f64, rng: &mut Rng) -> Result<Vec<(usize, usize)>, PriorError> {
    if labels.is_empty() {
        return Err(PriorError::Config("cSBM needs at least one labeled node".into()));
    }
    let k = labels.iter().copied().max().unwrap_or(0) + 1;
    let probs = csbm_block_probs(k, h, p_in, rng)?;
    Ok(sample_sbm_edges(labels, &probs, rng))
}

/// Erdős–Rényi graph: each of the n(n−1)/2 pairs independently with `p`.
pub fn sample_er_edges(n: usize, p: f64, rng: &mut Rng) -> Result<Vec<(usize, usize)>, PriorError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PriorError::Config(format!("p_er {p} outside [0, 1]")));
    }
    let members: Vec<usize> = (0..n).collect();
    let mut edges = Vec::new();
    sample_within(&members, p, rng, &mut edges);
    Ok(canonicalize_edges(edges))
}

/// Barabási–Albert preferential attachment starting from a complete graph
/// on `m + 1` nodes; every later node attaches to `m` distinct existing
/// nodes chosen with probability proportional to degree.
pub fn sample_ba_edges(n: usize, m: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>, PriorError> {
    if m < 1 || m >= n {
        return Err(PriorError::Config(format!("attachment count {m} must satisfy 1 <= m < n = {n}")));
    }
    let mut edges = Vec::with_capacity(m * (m + 1) / 2 + m * (n - m - 1));
    // every edge endpoint appears once here, so uniform draws are degree-weighted
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * edges.capacity());
    for i in 0..=m {
        for j in i + 1..=m {
            edges.push((i, j));
            endpoints.push(i);
            endpoints.push(j);
        }
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for v in m + 1..n {
        chosen.clear();
        while chosen.len() < m {
            let u = endpoints[rng.random_range(0..endpoints.len())];
            if !chosen.contains(&u) {
                chosen.push(u);
            }
        }
        for &u in &chosen {
            edges.push((u, v));
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    Ok(canonicalize_edges(edges))
}
