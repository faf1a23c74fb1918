//! Dense linear algebra helpers backed by nalgebra.

use nalgebra::DMatrix;

use crate::tensor::Tensor;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::from_parts(vec![m.nrows(), m.ncols()], data)
}

/// `m x` for a row-major matrix.
pub fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let c = m.cols();
    debug_assert_eq!(c, x.len());
    m.data()
        .chunks_exact(c)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `A B` for row-major matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * n];
    // SAFETY: slices cover the contiguous extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Singular values of `m`, descending.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with the usual `max(m, n) * eps * s_max` cutoff.
pub fn rank(m: &Tensor) -> usize {
    let s = singular_values(m);
    let tol = s.first().copied().unwrap_or(0.0) * (m.rows().max(m.cols()) as f64) * f64::EPSILON;
    s.iter().filter(|&&v| v > tol).count()
}

/// Left inverse `(A^T A)^{-1} A^T` of a full-column-rank matrix.
pub fn left_pinv(a: &Tensor) -> Option<Tensor> {
    let na = to_na(a);
    let gram = na.transpose() * &na;
    let chol = gram.cholesky()?;
    let inv = chol.solve(&na.transpose());
    Some(from_na(&inv))
}

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pinv(a: &Tensor) -> Tensor {
    let na = to_na(a);
    let svd = na.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * (a.rows().max(a.cols()) as f64) * f64::EPSILON;
    from_na(&svd.pseudo_inverse(tol).expect("u and v computed"))
}
