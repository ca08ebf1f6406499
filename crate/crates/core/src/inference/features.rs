//! Feature preprocessing shared by pre-training and inference.

use super::InferenceError;
use crate::linalg::Matrix;

/// Zero-pads `x` to `d_max` columns and rescales every entry by `d_max / d`,
/// so the mean absolute entry over all `d_max` columns matches the original.
pub fn pad_features(x: &Matrix, d_max: usize) -> Result<Matrix, InferenceError> {
    let d = x.cols;
    if d > d_max {
        return Err(InferenceError::FeatureCapacity { width: d, capacity: d_max });
    }
    if d == 0 {
        return Ok(Matrix::zeros(x.rows, d_max));
    }
    let factor = d_max as f64 / d as f64;
    let mut out = Matrix::zeros(x.rows, d_max);
    for r in 0..x.rows {
        for (o, v) in out.row_mut(r)[..d].iter_mut().zip(x.row(r)) {
            *o = v * factor;
        }
    }
    Ok(out)
}

/// `steps` rounds of self-plus-neighbour-sum aggregation, followed by
/// column standardization.
pub fn smooth_features(x: &Matrix, edges: &[(usize, usize)], steps: usize) -> Matrix {
    let mut cur = x.clone();
    for _ in 0..steps {
        cur = aggregate_once(&cur, edges);
    }
    cur.standardize_columns();
    cur
}

/// One round of `x_v ← x_v + Σ_{u∈N(v)} x_u`.
pub fn aggregate_once(x: &Matrix, edges: &[(usize, usize)]) -> Matrix {
    let mut next = x.clone();
    for &(i, j) in edges {
        for c in 0..x.cols {
            let (xi, xj) = (x.get(i, c), x.get(j, c));
            next.data[i * x.cols + c] += xj;
            next.data[j * x.cols + c] += xi;
        }
    }
    next
}

/// Applies `x ↦ sign(x)·|x|^power` to every entry.
pub fn signed_power(x: &Matrix, power: f64) -> Matrix {
    let data = x.data.iter().map(|&v| v.signum() * v.abs().powf(power)).collect();
    Matrix::from_vec(x.rows, x.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn full_width_is_identity() {
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        assert_eq!(pad_features(&x, 3).unwrap(), x);
    }

    #[test]
    fn half_width_doubles_entries() {
        let x = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let p = pad_features(&x, 4).unwrap();
        assert_eq!(p.row(0), &[2.0, -4.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[6.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn too_wide_is_rejected() {
        assert!(matches!(
            pad_features(&Matrix::zeros(1, 5), 4),
            Err(InferenceError::FeatureCapacity { width: 5, capacity: 4 })
        ));
    }

    #[test]
    fn mean_absolute_entry_is_preserved() {
        let mut rng = rng_from_seed(21);
        let (mut before, mut after) = (0.0, 0.0);
        for _ in 0..200 {
            let d = rng.random_range(1..=16);
            let x = Matrix::from_fn(10, d, |_, _| rng.random_range(-3.0..3.0));
            let p = pad_features(&x, 16).unwrap();
            before += x.data.iter().map(|v: &f64| v.abs()).sum::<f64>() / (10 * d) as f64;
            after += p.data.iter().map(|v| v.abs()).sum::<f64>() / (10 * 16) as f64;
        }
        assert!((before - after).abs() / before < 1e-12);
    }

    #[test]
    fn path_aggregation_by_hand() {
        let x = Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]);
        let raw = aggregate_once(&x, &[(0, 1), (1, 2)]);
        assert_eq!(raw.data, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn smoothing_without_steps_or_edges_is_identity_on_standardized_input() {
        let mut x = Matrix::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0, 0.0, 1.0]);
        x.standardize_columns();
        assert!(smooth_features(&x, &[(0, 1)], 0).max_abs_diff(&x) < 1e-12);
        assert!(smooth_features(&x, &[], 3).max_abs_diff(&x) < 1e-12);
    }
}
