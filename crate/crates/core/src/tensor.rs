//! Dense row-major matrices over `f32` or `f64`, with gemm dispatched to
//! `matrixmultiply`.

use std::fmt::Debug;

use num_traits::Float;

/// Scalar type usable by the autodiff engine.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `C = alpha * op(A) * op(B) + beta * C` on strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// regions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn scalar(x: R) -> Self {
        Matrix::from_vec(1, 1, vec![x])
    }

    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Matrix<R>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<S: Real>(&self) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| S::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix<R> {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm<R: Real>(
    alpha: R,
    a: &Matrix<R>,
    trans_a: bool,
    b: &Matrix<R>,
    trans_b: bool,
    beta: R,
    c: &mut Matrix<R>,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: shapes are asserted above and the slices outlive the call.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        )
    }
}

/// `op(a) * op(b)` into a fresh matrix.
pub fn matmul<R: Real>(a: &Matrix<R>, trans_a: bool, b: &Matrix<R>, trans_b: bool) -> Matrix<R> {
    let m = if trans_a { a.cols } else { a.rows };
    let n = if trans_b { b.rows } else { b.cols };
    let mut c = Matrix::zeros(m, n);
    gemm(R::one(), a, trans_a, b, trans_b, R::zero(), &mut c);
    c
}

pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |s, (&x, &y)| s + x * y)
}

/// Numerically stable `log Σ exp`.
pub fn logsumexp<R: Real>(xs: impl Iterator<Item = R> + Clone) -> R {
    let m = xs.clone().fold(R::neg_infinity(), R::max);
    if m == R::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<R>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut c = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.data[i * b.cols + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_under_all_transposes() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.3 - 1.0).collect());
        let b = Matrix::from_vec(4, 2, (0..8).map(|x| (x as f64).sin()).collect());
        let want = naive(&a, &b);
        let close = |m: &Matrix<f64>| {
            m.data
                .iter()
                .zip(&want.data)
                .all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(&matmul(&a, false, &b, false)));
        assert!(close(&matmul(&a.transpose(), true, &b, false)));
        assert!(close(&matmul(&a, false, &b.transpose(), true)));
        assert!(close(&matmul(&a.transpose(), true, &b.transpose(), true)));
    }

    #[test]
    fn logsumexp_is_stable() {
        let v = [1000.0f64, 1000.0];
        assert!((logsumexp(v.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
    }
}
