use rand_distr::{Distribution, StandardNormal};

use super::InferenceError;
use crate::linalg::{orthonormalize_columns, symmetric_eigen, Matrix};
use crate::rng::rng_from_seed;

/// Problems with `min(n, d)` at or below this size use a dense decomposition.
pub const DENSE_SVD_LIMIT: usize = 64;
pub const SVD_OVERSAMPLING: usize = 8;
pub const SVD_POWER_ITERATIONS: usize = 4;

/// Flips each column so that its largest-magnitude entry is positive.
fn fix_signs(m: &mut Matrix) {
    for c in 0..m.cols {
        let mut best = 0.0f64;
        for r in 0..m.rows {
            let v = m.get(r, c);
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            for r in 0..m.rows {
                let v = -m.get(r, c);
                m.set(r, c, v);
            }
        }
    }
}

/// `U_k·Σ_k` from the eigen-decomposition of the smaller Gram matrix.
fn dense_projection(x: &Matrix, k: usize) -> Result<Matrix, InferenceError> {
    if x.cols <= x.rows {
        let (_, v) = symmetric_eigen(&x.gram())?;
        let vk = v.select_cols(&(0..k).collect::<Vec<_>>());
        Ok(x.matmul(&vk))
    } else {
        let (vals, u) = symmetric_eigen(&x.matmul(&x.transpose()))?;
        let mut out = u.select_cols(&(0..k).collect::<Vec<_>>());
        for c in 0..k {
            let s = vals[c].max(0.0).sqrt();
            for r in 0..out.rows {
                let v = out.get(r, c) * s;
                out.set(r, c, v);
            }
        }
        Ok(out)
    }
}

/// Randomized subspace iteration: sketch `X·Ω`, refine with power
/// iterations, then decompose the small projected problem exactly.
fn randomized_projection(x: &Matrix, k: usize, seed: u64) -> Result<Matrix, InferenceError> {
    let l = (k + SVD_OVERSAMPLING).min(x.rows.min(x.cols));
    let mut rng = rng_from_seed(seed);
    let omega = Matrix::from_fn(x.cols, l, |_, _| StandardNormal.sample(&mut rng));
    let xt = x.transpose();
    let mut q = x.matmul(&omega);
    orthonormalize_columns(&mut q);
    for _ in 0..SVD_POWER_ITERATIONS {
        let mut z = xt.matmul(&q);
        orthonormalize_columns(&mut z);
        q = x.matmul(&z);
        orthonormalize_columns(&mut q);
    }
    // B = QᵀX is l × d; BBᵀ = Ũ Λ Ũᵀ gives U = Q·Ũ and Σ = √Λ
    let b = q.transpose().matmul(x);
    let (vals, ut) = symmetric_eigen(&b.matmul(&b.transpose()))?;
    let mut out = q.matmul(&ut.select_cols(&(0..k).collect::<Vec<_>>()));
    for c in 0..k {
        let s = vals[c].max(0.0).sqrt();
        for r in 0..out.rows {
            let v = out.get(r, c) * s;
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Projection of the rows of `x` onto its top-`k` right singular
/// directions, i.e. `U_k·Σ_k`, with deterministic column signs.
pub fn truncated_svd(x: &Matrix, k: usize, seed: u64) -> Result<Matrix, InferenceError> {
    let m = x.rows.min(x.cols);
    if k == 0 || k > m {
        return Err(InferenceError::Components { requested: k, max: m });
    }
    let mut out = if m <= DENSE_SVD_LIMIT { dense_projection(x, k)? } else { randomized_projection(x, k, seed)? };
    fix_signs(&mut out);
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::Svd("non-finite singular vectors".into()));
    }
    Ok(out)
}
