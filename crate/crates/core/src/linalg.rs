//! Dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3xX, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Right singular vectors and singular values of a matrix, sorted descending.
#[derive(Clone, Debug)]
pub struct GramSvd {
    /// Columns are right singular vectors (of the possibly transposed input).
    pub v: DMatrix<f64>,
    pub sigma: DVector<f64>,
    /// True when the decomposition was taken of the transpose.
    pub transposed: bool,
}

/// Singular values and right singular vectors via the eigendecomposition of
/// the smaller Gram matrix. Cheap when one side is short (tens of images
/// against tens of thousands of pixels).
pub fn gram_svd(m: &DMatrix<f64>) -> Result<GramSvd> {
    let transposed = m.nrows() < m.ncols();
    let gram = if transposed { m * m.transpose() } else { m.transpose() * m };
    let eig = SymmetricEigen::try_new(gram, EIGEN_EPS, EIGEN_MAX_ITER).ok_or(Error::SvdNoConvergence)?;
    let k = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let v = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let sigma = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i].max(0.0).sqrt()));
    Ok(GramSvd { v, sigma, transposed })
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(gram_svd(m)?.sigma[0])
}

/// Applies `sigma_k -> shrink(k, sigma_k)` to the singular values of `m`
/// and reassembles the matrix as `M V diag(shrink/sigma) V^T`.
pub fn map_singular_values(m: &DMatrix<f64>, shrink: impl Fn(usize, f64) -> f64) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(m.clone());
    }
    let svd = gram_svd(m)?;
    let k = svd.sigma.len();
    let factors = DVector::from_iterator(
        k,
        (0..k).map(|i| {
            let s = svd.sigma[i];
            if s > 0.0 {
                shrink(i, s) / s
            } else {
                0.0
            }
        }),
    );
    let w = &svd.v * DMatrix::from_diagonal(&factors) * svd.v.transpose();
    Ok(if svd.transposed { w * m } else { m * w })
}

/// Numerical rank of a `3 x n` matrix (relative tolerance on singular values).
pub fn rank3(l: &Matrix3xX<f64>) -> usize {
    let gram: Matrix3<f64> = l * l.transpose();
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&e| e > max * 1e-12).count()
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe row-major buffers whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// A matrix inside a slice: element `(r, c)` lives at
/// `offset + r * row_stride + c * col_stride`.
#[derive(Clone, Copy, Debug)]
pub struct StridedView {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl StridedView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        StridedView { offset, row_stride: cols, col_stride: 1 }
    }

    pub fn transposed(self) -> Self {
        StridedView { offset: self.offset, row_stride: self.col_stride, col_stride: self.row_stride }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C = alpha * A * B + beta * C` for an `m x k` view `A` and a `k x n`
/// view `B`. Panics if a view reaches outside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: StridedView,
    b: &[f64],
    bv: StridedView,
    beta: f64,
    c: &mut [f64],
    cv: StridedView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len(), "output view out of bounds");
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                c[cv.offset + r * cv.row_stride + col * cv.col_stride] *= beta;
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len() && bv.last(k, n) < b.len(), "input view out of bounds");
    // SAFETY: the asserts above bound every element each view can address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_svd_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 3.0]));
        let s = gram_svd(&m).unwrap();
        assert_eq!(s.sigma.as_slice(), &[5.0, 3.0, 1.0]);
    }

    #[test]
    fn wide_and_tall_agree() {
        let m = DMatrix::from_fn(7, 3, |r, c| ((r * 3 + c) as f64).sin());
        let a = gram_svd(&m).unwrap();
        let b = gram_svd(&m.transpose()).unwrap();
        for i in 0..3 {
            assert!((a.sigma[i] - b.sigma[i]).abs() < 1e-12);
        }
        let same = map_singular_values(&m, |_, s| s).unwrap();
        assert!((same - &m).norm() < 1e-12);
        let same_t = map_singular_values(&m.transpose(), |_, s| s).unwrap();
        assert!((same_t - m.transpose()).norm() < 1e-12);
    }

    #[test]
    fn gemm_matches_nalgebra() {
        let a = DMatrix::from_fn(4, 5, |r, c| (r as f64) - 0.3 * c as f64);
        let b = DMatrix::from_fn(5, 3, |r, c| (r * c) as f64 * 0.1 + 1.0);
        let row = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        let mut c = vec![0.0; 12];
        gemm(4, 5, 3, 1.0, &row(&a), false, &row(&b), false, 0.0, &mut c);
        let expect = row(&(&a * &b));
        assert!(c.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
        // Transposed operands: A^T stored as 5x4, B^T stored as 3x5.
        let mut c2 = vec![0.0; 12];
        gemm(4, 5, 3, 1.0, &row(&a.transpose()), true, &row(&b.transpose()), true, 0.0, &mut c2);
        assert!(c2.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn rank_of_light_matrices() {
        let l = Matrix3xX::from_columns(&[nalgebra::Vector3::x(), nalgebra::Vector3::y(), nalgebra::Vector3::x()]);
        assert_eq!(rank3(&l), 2);
        let l = Matrix3xX::from_columns(&[nalgebra::Vector3::x(), nalgebra::Vector3::y(), nalgebra::Vector3::z()]);
        assert_eq!(rank3(&l), 3);
    }
}
