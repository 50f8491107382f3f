//! Dense row-major matrices, softmax and cross-entropy, and the
//! central-difference gradient oracle used to verify every backward pass.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to this floor before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("softmax of an empty vector")]
    EmptyVector,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape {rows}x{cols} does not match {len} values")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite function value while perturbing coordinate {index}")]
    NonFinite { index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if data.len() != rows * cols {
            return Err(NumericError::ShapeMismatch { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out = selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(y, &mut out);
        out
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            axpy(yr, self.row(r), out);
        }
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            axpy(s, b, self.row_mut(r));
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(scale, &other.data, &mut self.data);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>, NumericError> {
    if v.is_empty() {
        return Err(NumericError::EmptyVector);
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax. An empty slice is left untouched.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `-Σ t_i log(max(p_i, LOG_FLOOR))` for an arbitrary target distribution.
pub fn cross_entropy_soft(p: &[f64], target: &[f64]) -> Result<f64, NumericError> {
    if p.len() != target.len() {
        return Err(NumericError::LengthMismatch { expected: target.len(), actual: p.len() });
    }
    Ok(p.iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&pi, &t)| -t * libm::log(pi.max(LOG_FLOOR)))
        .sum())
}

/// Cross-entropy against a one-hot target, `-Σ y_i log p_i`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64, NumericError> {
    cross_entropy_soft(p, y)
}

/// Gradient of `cross_entropy_soft(softmax(z), target)` with respect to `z`,
/// given `p = softmax(z)`. Clamped terms contribute nothing, matching the
/// forward pass.
pub fn cross_entropy_soft_grad(p: &[f64], target: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|g| *g = 0.0);
    for (i, (&pi, &t)) in p.iter().zip(target).enumerate() {
        if t == 0.0 || pi < LOG_FLOOR {
            continue;
        }
        // d(-t log p_i)/dz = t (p - e_i)
        for (g, &pj) in out.iter_mut().zip(p) {
            *g += t * pj;
        }
        out[i] -= t;
    }
}

/// Central finite differences:
/// `g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>, NumericError>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumericError::BadStep(eps));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericError::NonFinite { index: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a - b| / max(1, |b|)`, the comparison used for all gradient checks.
#[inline]
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 0.0]).unwrap();
        // e / (e + 1)
        let e = core::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        assert_eq!(softmax(&[]), Err(NumericError::EmptyVector));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let y = [0.0, 1.0, 0.0, 0.0];
        let ce = cross_entropy(&[0.25; 4], &y).unwrap();
        assert!((ce - libm::log(4.0)).abs() < 1e-15);
        assert!((ce - 1.38629).abs() < 1e-5);
        assert_eq!(cross_entropy(&y, &y).unwrap(), 0.0);
        // clamped, not infinite
        let ce = cross_entropy(&[1.0, 0.0, 0.0, 0.0], &y).unwrap();
        assert!((ce - 12.0 * core::f64::consts::LN_10).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], &y),
            Err(NumericError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_monotone_in_hot_probability() {
        let y = [1.0, 0.0];
        let mut last = -1.0;
        for k in (1..10).rev() {
            let p0 = k as f64 / 10.0;
            let ce = cross_entropy(&[p0, 1.0 - p0], &y).unwrap();
            assert!(ce > last);
            last = ce;
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], DEFAULT_FD_EPS).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], DEFAULT_FD_EPS).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(matches!(
            finite_diff_grad(|x| 1.0 / x[0], &[1e-6], 1e-5),
            Ok(_) | Err(NumericError::NonFinite { .. })
        ));
        assert!(matches!(
            finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5),
            Err(NumericError::NonFinite { index: 0 })
        ));
        assert_eq!(finite_diff_grad(|x| x[0], &[0.0], 0.0), Err(NumericError::BadStep(0.0)));
    }

    #[test]
    fn soft_cross_entropy_gradient_matches_fd() {
        let target = [0.1, 0.2, 0.3, 0.4];
        let z = [0.3, -1.2, 2.0, 0.7];
        let loss = |z: &[f64]| {
            let p = softmax(z).unwrap();
            cross_entropy_soft(&p, &target).unwrap()
        };
        let fd = finite_diff_grad(loss, &z, DEFAULT_FD_EPS).unwrap();
        let p = softmax(&z).unwrap();
        let mut g = [0.0; 4];
        cross_entropy_soft_grad(&p, &target, &mut g);
        for (a, n) in g.iter().zip(&fd) {
            assert!(grad_rel_error(*a, *n) < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn matrix_ops() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let mut z = Matrix::zeros(2, 3);
        z.add_outer(2.0, &[1.0, 0.5], &[1.0, 2.0, 3.0]);
        assert_eq!(z.as_slice(), &[2.0, 4.0, 6.0, 1.0, 2.0, 3.0]);
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 1..8), c in -100.0f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(argmax(&p), argmax(&v));
        }
    }
}
