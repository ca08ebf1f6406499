use super::{shape_err, NumericsError, Real, SparseMatrix, Tensor};

pub const LAYER_NORM_EPS: Real = 1e-5;

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [Real],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatView<'a> {
    pub fn of(t: &'a Tensor) -> Self {
        Self { data: t.data(), rows: t.rows(), cols: t.cols(), transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b + beta·out` for row-major `out` of shape (m, n).
pub(crate) fn gemm_into(out: &mut [Real], a: MatView, b: MatView, beta: Real) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views cover exactly rows*cols elements and the strides
    // address only elements inside them; `out` is an exclusive m*n buffer.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Matrix product `a·b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}: inner dimensions differ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; a.rows() * b.cols()];
    gemm_into(&mut out, MatView::of(a), MatView::of(b), 0.0);
    let t = Tensor::from_matrix(a.rows(), b.cols(), out)?;
    t.check_finite("matmul")?;
    Ok(t)
}

/// Matrix product `a·bᵀ`, the natural form for `X·Wᵀ` projections.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix("matmul_nt", a)?;
    require_matrix("matmul_nt", b)?;
    if a.cols() != b.cols() {
        return Err(shape_err(
            "matmul_nt",
            format!("{:?} x {:?}^T: inner dimensions differ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; a.rows() * b.rows()];
    gemm_into(&mut out, MatView::of(a), MatView::of(b).t(), 0.0);
    let t = Tensor::from_matrix(a.rows(), b.rows(), out)?;
    t.check_finite("matmul_nt")?;
    Ok(t)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    x.check_finite("softmax_rows")?;
    let cols = x.cols();
    let mut out = x.data().to_vec();
    if cols > 0 {
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Normalized rows plus per-row reciprocal standard deviations, kept for
/// the backward pass.
pub(crate) struct LayerNormCache {
    pub normalized: Vec<Real>,
    pub inv_std: Vec<Real>,
}

pub(crate) fn layer_norm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, LayerNormCache), NumericsError> {
    let d = x.cols();
    if d == 0 {
        return Err(shape_err("layer_norm", "feature dimension must be at least 1"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("gamma/beta of length {}/{} for width {}", gamma.len(), beta.len(), d),
        ));
    }
    x.check_finite("layer_norm")?;
    let rows = x.rows();
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<Real>() / d as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = rstd;
        for c in 0..d {
            let xh = (row[c] - mean) * rstd;
            normalized[r * d + c] = xh;
            out[r * d + c] = g[c] * xh + b[c];
        }
    }
    let t = Tensor::new(x.shape().to_vec(), out)?;
    t.check_finite("layer_norm")?;
    Ok((t, LayerNormCache { normalized, inv_std }))
}

/// Per-row normalization to zero mean and unit variance, then `gamma ⊙ · + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, NumericsError> {
    layer_norm_with_cache(x, gamma, beta).map(|(t, _)| t)
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

pub(crate) fn gelu_scalar(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &Tensor) -> Result<Tensor, NumericsError> {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.check_finite("gelu")?;
    Ok(t)
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor, NumericsError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let t = Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())?;
    t.check_finite(op)?;
    Ok(t)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    zip_same("add", a, b, |x, y| x + y)
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: Real) -> Result<Tensor, NumericsError> {
    let t = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())?;
    t.check_finite("scale")?;
    Ok(t)
}

/// Adds a length-`cols` vector to every row of a matrix.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor, NumericsError> {
    let cols = x.cols();
    if row.len() != cols {
        return Err(shape_err("add_row", format!("row of {} for width {}", row.len(), cols)));
    }
    let mut data = x.data().to_vec();
    for chunk in data.chunks_mut(cols.max(1)) {
        for (d, r) in chunk.iter_mut().zip(row.data()) {
            *d += r;
        }
    }
    let t = Tensor::new(x.shape().to_vec(), data)?;
    t.check_finite("add_row")?;
    Ok(t)
}

pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor, NumericsError> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        if i >= rows {
            return Err(NumericsError::Index { op: "gather_rows", index: i, len: rows });
        }
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_matrix(idx.len(), cols, data)
}

/// Columns `start..end`.
pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor, NumericsError> {
    if start > end || end > x.cols() {
        return Err(shape_err("slice_cols", format!("{}..{} of width {}", start, end, x.cols())));
    }
    let mut data = Vec::with_capacity(x.rows() * (end - start));
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[start..end]);
    }
    Tensor::from_matrix(x.rows(), end - start, data)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
    let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(shape_err("concat_cols", "row counts differ"));
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_matrix(rows, width, data)
}

/// Sparse-constant times dense: `a · x`.
pub fn spmm(a: &SparseMatrix, x: &Tensor) -> Result<Tensor, NumericsError> {
    if a.cols != x.rows() {
        return Err(shape_err("spmm", format!("{}x{} times {:?}", a.rows, a.cols, x.shape())));
    }
    let width = x.cols();
    let t = Tensor::from_matrix(a.rows, width, a.mul_dense(x.data(), width))?;
    t.check_finite("spmm")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_matrix(m, n, out).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_b_is_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(3, 4, &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn small_hand_product() {
        let a = Tensor::from_matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = Tensor::from_matrix(
            3,
            7,
            (0..21).map(|i| b.get(i % 7, i / 7)).collect(),
        )
        .unwrap();
        assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let eq = softmax_rows(&Tensor::full(&[1, 4], 2.5)).unwrap();
        for v in eq.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let big = softmax_rows(&Tensor::from_matrix(1, 2, vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300);
        let three = softmax_rows(&Tensor::from_matrix(1, 2, vec![0.0, (3.0 as Real).ln()]).unwrap())
            .unwrap();
        assert!((three.data()[0] - 0.25).abs() < 1e-12);
        assert!((three.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_matrix(1, 2, vec![Real::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let constant = Tensor::full(&[2, 3], 4.2);
        let out = layer_norm(&constant, &ones, &zeros).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));

        let pair = Tensor::from_matrix(1, 2, vec![-1.0, 1.0]).unwrap();
        let out = layer_norm(&pair, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        // variance 1, so the epsilon shifts the result by ~5e-6
        assert!((out.data()[0] + 1.0).abs() < 1e-5 && (out.data()[1] - 1.0).abs() < 1e-5);

        let beta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_matrix(2, 3, vec![1.0, 5.0, -2.0, 0.3, 0.1, 9.0]).unwrap();
        let out = layer_norm(&x, &Tensor::zeros(&[3]), &beta).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), beta.data());
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
