//! Dense row-major matrices and the small set of factorizations the
//! diagnostics need: power iteration, one-sided Jacobi SVD, and a classical
//! Jacobi eigensolver for symmetric matrices (used as an independent check
//! against the iterative routines).

use crate::rng;
use rand::Rng;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Wraps a row-major buffer; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match dimensions");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    /// `self += alpha * other` (elementwise).
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += alpha * y;
        }
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies a contiguous block of columns into a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Mat {
        assert!(start + width <= self.cols);
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.row_mut(r)[self.cols..].copy_from_slice(other.row(r));
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * b`, shapes `(m,k) x (k,n)`.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, b.cols);
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                b.cols,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        out
    }

    /// `self * b^T`, shapes `(m,k) x (n,k)`.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dimension");
        let mut out = Mat::zeros(self.rows, b.rows);
        unsafe {
            matrixmultiply::dgemm(
                self.rows,
                self.cols,
                b.rows,
                1.0,
                self.data.as_ptr(),
                self.cols as isize,
                1,
                b.data.as_ptr(),
                1,
                b.cols as isize,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        out
    }

    /// `self^T * b`, shapes `(k,m) x (k,n)`.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn inner dimension");
        let mut out = Mat::zeros(self.cols, b.cols);
        unsafe {
            matrixmultiply::dgemm(
                self.cols,
                self.rows,
                b.cols,
                1.0,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                out.cols as isize,
                1,
            );
        }
        out
    }

    /// `self * x` for a vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[r] = acc;
        }
        out
    }

    /// `self^T * x` for a vector `x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a power-method run.
#[derive(Debug, Clone)]
pub struct PowerResult {
    /// Rayleigh-quotient estimate of the dominant eigenvalue.
    pub value: f64,
    /// `||A v - value * v||` at the final iterate.
    pub residual: f64,
    pub converged: bool,
    pub iters: usize,
    /// Final unit-norm iterate (useful for warm starts).
    pub vector: Vec<f64>,
}

/// Power iteration on a linear operator given as a closure.
///
/// Normalizes, applies the operator, and updates the Rayleigh quotient until
/// `|value_k - value_{k-1}| < tol * max(1, |value_k|)` or `max_iters` is hit.
/// `init` supplies a warm-start direction; otherwise a seeded random start
/// is used.
pub fn power_method<F>(
    mut apply: F,
    dim: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    init: Option<&[f64]>,
) -> PowerResult
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(dim > 0 && max_iters >= 1);
    let mut v: Vec<f64> = match init {
        Some(v0) if norm2(v0) > 0.0 => v0.to_vec(),
        _ => {
            let mut rng = rng::chacha(seed);
            (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()
        }
    };
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let mut value = 0.0;
    let mut converged = false;
    let mut iters = 0;
    for k in 0..max_iters {
        iters = k + 1;
        let w = apply(&v);
        let new_value = dot(&v, &w);
        let wn = norm2(&w);
        if wn == 0.0 {
            // Operator annihilates the iterate; dominant eigenvalue is 0,
            // which the final Rayleigh quotient below reports.
            converged = true;
            break;
        }
        let delta = (new_value - value).abs();
        value = new_value;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wn;
        }
        if k > 0 && delta < tol * value.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    // Residual at the final iterate costs one extra application.
    let w = apply(&v);
    let value_final = dot(&v, &w);
    let mut res = 0.0;
    for (wi, vi) in w.iter().zip(&v) {
        let d = wi - value_final * vi;
        res += d * d;
    }
    PowerResult {
        value: value_final,
        residual: res.sqrt(),
        converged,
        iters,
        vector: v,
    }
}

/// Singular values of `m` (descending) via one-sided Jacobi.
///
/// Orthogonalizes the columns of the (transposed when wide) matrix by plane
/// rotations; the column norms at convergence are the singular values.
pub fn jacobi_svd_values(m: &Mat) -> Vec<f64> {
    let a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = (a.rows(), a.cols());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Column-major copy so rotations touch contiguous memory.
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();

    let tol = 1e-14;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let (ci, cj) = {
                    let (lo, hi) = col.split_at_mut(j);
                    (&mut lo[i], &mut hi[0])
                };
                let alpha = dot(ci, ci);
                let beta = dot(cj, cj);
                let gamma = dot(ci, cj);
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
                    let xi = *x;
                    let yj = *y;
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = col.iter().map(|c| norm2(c)).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Eigenvalues of a symmetric matrix via the classical two-sided Jacobi
/// method, sorted by descending magnitude.
pub fn jacobi_eigenvalues_sym(m: &Mat) -> Vec<f64> {
    assert_eq!(m.rows(), m.cols(), "symmetric eigensolver needs square input");
    let n = m.rows();
    if n == 0 {
        return Vec::new();
    }
    let mut a = m.clone();
    let tol = 1e-14;
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).abs();
            }
        }
        if off < tol * a.frob_norm().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.abs().partial_cmp(&x.abs()).unwrap());
    eig
}
