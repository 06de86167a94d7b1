//! Numeric kernels shared by the model, the trainers and the test oracles.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! for inference and in `f64` for gradient checking. Reductions always sum
//! left to right so results are bit-reproducible on one machine.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type used by the kernels.
pub trait Real:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Appends one row; `row.len()` must equal `cols`.
    pub fn push_row(&mut self, row: &[T]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = x · W` for a row vector `x` (len `W.rows`) and `W` of shape in × out.
pub fn vec_mat<T: Real>(x: &[T], w: &Matrix<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, w.row(i), out);
        }
    }
}

/// `out = W · y` (i.e. `y · Wᵀ`) for `W` of shape in × out and `y` of len out.
pub fn mat_vec<T: Real>(w: &Matrix<T>, y: &[T], out: &mut [T]) {
    debug_assert_eq!(y.len(), w.cols);
    debug_assert_eq!(out.len(), w.rows);
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(i), y);
    }
}

/// `W += xᵀ · y` (rank-one update) for `W` of shape len(x) × len(y).
pub fn outer_acc<T: Real>(x: &[T], y: &[T], w: &mut Matrix<T>) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(y.len(), w.cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi != T::zero() {
            axpy(xi, y, w.row_mut(i));
        }
    }
}

/// Masked, max-shifted softmax over one row of logits.
///
/// Masked-out entries come back as exactly zero.
pub fn softmax_row<T: Real>(logits: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "softmax: {} logits vs {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    let mut max = T::neg_infinity();
    for (&x, &m) in logits.iter().zip(mask) {
        if m && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::EmptyAttentionRow);
    }
    let mut out = vec![T::zero(); logits.len()];
    let mut sum = T::zero();
    for ((o, &x), &m) in out.iter_mut().zip(logits).zip(mask) {
        if m {
            *o = (x - max).exp();
            sum += *o;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Unmasked softmax in place; `row` must be non-empty.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    debug_assert!(!row.is_empty());
    let mut max = T::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Per-pair inverse frequencies `theta_base^(-2i/d)` for a rotary vector of length `d`.
pub fn rope_inv_freq(d: usize, theta_base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|i| theta_base.powf(-(2.0 * i as f64) / d as f64))
        .collect()
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` by `angle_i = position * inv_freq[i]`.
///
/// A negative `sign` applies the inverse rotation (used by the backward pass).
pub fn rope_apply<T: Real>(x: &mut [T], position: usize, inv_freq: &[f64], sign: f64) {
    debug_assert_eq!(x.len(), inv_freq.len() * 2);
    for (pair, &f) in x.chunks_exact_mut(2).zip(inv_freq) {
        let angle = sign * position as f64 * f;
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::lit(s), T::lit(c));
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Rotary position encoding of a single vector.
pub fn rope_rotate<T: Real>(vec: &[T], position: usize, theta_base: f64) -> Result<Vec<T>> {
    if !vec.len().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rotary encoding needs an even length, got {}",
            vec.len()
        )));
    }
    let mut out = vec.to_vec();
    rope_apply(
        &mut out,
        position,
        &rope_inv_freq(vec.len(), theta_base),
        1.0,
    );
    Ok(out)
}

/// Root-mean-square of `x` with `eps`, i.e. `sqrt(mean(x²) + eps)`.
#[inline]
pub fn rms<T: Real>(x: &[T], eps: f64) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss += v * v;
    }
    (ss / T::lit(x.len() as f64) + T::lit(eps)).sqrt()
}

/// `out_i = gain_i * vec_i / sqrt(mean(vec²) + eps)`.
///
/// A zero vector with `eps == 0` maps to zero rather than NaN.
pub fn rms_norm<T: Real>(vec: &[T], gain: &[T], eps: f64) -> Result<Vec<T>> {
    if vec.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm: vec len {} vs gain len {}",
            vec.len(),
            gain.len()
        )));
    }
    let mut out = vec![T::zero(); vec.len()];
    rms_norm_into(vec, gain, eps, &mut out);
    Ok(out)
}

/// Same as [`rms_norm`] writing into `out`; returns the rms used.
#[inline]
pub fn rms_norm_into<T: Real>(vec: &[T], gain: &[T], eps: f64, out: &mut [T]) -> T {
    let r = rms(vec, eps);
    if r == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return r;
    }
    let inv = T::one() / r;
    for ((o, &v), &g) in out.iter_mut().zip(vec).zip(gain) {
        *o = g * v * inv;
    }
    r
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}
