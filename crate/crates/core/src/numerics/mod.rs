//! Dense tensor arithmetic, the reverse-mode tape, and finite-difference
//! gradient checking.
//!
//! Everything here runs in `f64` with a fixed summation order, so two calls
//! with identical inputs produce bitwise-identical outputs.

mod grad_check;
mod tape;
mod tensor;

pub use grad_check::{grad_check, CoordinateSample, GradientReport, ParamVector};
pub use tape::{NodeId, Tape};
pub use tensor::{dot, Tensor};

use crate::error::{Error, Result};

/// Above this value of `x / beta` softplus returns `x` directly.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

/// Row-wise softmax with per-row max subtraction.
///
/// `mask[i * n + j] == true` keeps entry `(i, j)`; masked entries come out as
/// exactly zero. A row with no kept entry is an error.
pub fn softmax_rows(a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "softmax_rows expects a matrix, got {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.rows(), a.cols());
    if let Some(mask) = mask {
        if mask.len() != m * n {
            return Err(Error::Dimension(format!(
                "mask has {} entries for a {m}x{n} matrix",
                mask.len()
            )));
        }
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let row = a.row(i);
        let max = (0..n)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: i });
        }
        let o = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..n {
            if keep(j) {
                let e = (row[j] - max).exp();
                o[j] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// `beta * ln(1 + exp(x / beta))`, returning `x` once `x / beta` exceeds
/// [`SOFTPLUS_LINEAR_THRESHOLD`]. The result is clamped to the smallest
/// positive normal so it is always strictly positive.
pub fn softplus(x: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("softplus softness must be > 0, got {beta}")));
    }
    Ok(softplus_unchecked(x, beta))
}

#[inline]
pub(crate) fn softplus_unchecked(x: f64, beta: f64) -> f64 {
    let y = x / beta;
    if y > SOFTPLUS_LINEAR_THRESHOLD {
        x
    } else {
        (beta * y.exp().ln_1p()).max(f64::MIN_POSITIVE)
    }
}

/// Softplus value together with its partial derivatives `(f, df/dx, df/dbeta)`.
#[inline]
pub(crate) fn softplus_with_grad(x: f64, beta: f64) -> (f64, f64, f64) {
    let y = x / beta;
    if y > SOFTPLUS_LINEAR_THRESHOLD {
        (x, 1.0, 0.0)
    } else {
        let l = y.exp().ln_1p();
        let s = logistic(y);
        ((beta * l).max(f64::MIN_POSITIVE), s, l - y * s)
    }
}

#[inline]
pub(crate) fn logistic(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
