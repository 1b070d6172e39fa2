//! Parameter vectors and the handful of norms the correction formulas need.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A point in R^d. All arithmetic is 64-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Validating constructor: at least one entry, all finite.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyVector);
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    /// The `i`-th standard basis vector.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&x| f(x)).collect())
    }

    /// Componentwise combination of two equal-length vectors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn linf_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|x| a * x)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Self) {
        debug_assert_eq!(self.len(), x.len());
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += a * xi;
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for &ParamVector {
    type Output = ParamVector;
    fn add(self, rhs: &ParamVector) -> ParamVector {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Add for ParamVector {
    type Output = ParamVector;
    fn add(mut self, rhs: ParamVector) -> ParamVector {
        self += &rhs;
        self
    }
}

impl Sub for &ParamVector {
    type Output = ParamVector;
    fn sub(self, rhs: &ParamVector) -> ParamVector {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Sub for ParamVector {
    type Output = ParamVector;
    fn sub(mut self, rhs: ParamVector) -> ParamVector {
        self -= &rhs;
        self
    }
}

impl Add<&ParamVector> for ParamVector {
    type Output = ParamVector;
    fn add(mut self, rhs: &ParamVector) -> ParamVector {
        self += rhs;
        self
    }
}

impl Sub<&ParamVector> for ParamVector {
    type Output = ParamVector;
    fn sub(mut self, rhs: &ParamVector) -> ParamVector {
        self -= rhs;
        self
    }
}

impl AddAssign<&ParamVector> for ParamVector {
    fn add_assign(&mut self, rhs: &ParamVector) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&ParamVector> for ParamVector {
    fn sub_assign(&mut self, rhs: &ParamVector) {
        self.axpy(-1.0, rhs);
    }
}

impl Mul<f64> for &ParamVector {
    type Output = ParamVector;
    fn mul(self, a: f64) -> ParamVector {
        self.scaled(a)
    }
}

impl Mul<f64> for ParamVector {
    type Output = ParamVector;
    fn mul(mut self, a: f64) -> ParamVector {
        self.0.iter_mut().for_each(|x| *x *= a);
        self
    }
}

impl Neg for &ParamVector {
    type Output = ParamVector;
    fn neg(self) -> ParamVector {
        self.map(|x| -x)
    }
}

impl Neg for ParamVector {
    type Output = ParamVector;
    fn neg(self) -> ParamVector {
        self * -1.0
    }
}

fn check_finite(v: &ParamVector) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Perturbed one-norm `sum_i sqrt(v_i^2 + eps)`.
///
/// `eps = 0` is accepted and gives the plain l1 norm.
pub fn smoothed_one_norm(v: &ParamVector, eps: f64) -> Result<f64> {
    check_finite(v)?;
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(invalid("eps", format!("must be finite and >= 0, got {eps}")));
    }
    Ok(v.iter().map(|&x| (x * x + eps).sqrt()).sum())
}

/// Componentwise soft sign `v_i / sqrt(v_i^2 + eps)`, the gradient of
/// [`smoothed_one_norm`].
pub fn softsign(v: &ParamVector, eps: f64) -> Result<ParamVector> {
    check_finite(v)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps", format!("must be finite and > 0, got {eps}")));
    }
    Ok(softsign_unchecked(v, eps))
}

pub(crate) fn softsign_unchecked(v: &ParamVector, eps: f64) -> ParamVector {
    v.map(|x| x / (x * x + eps).sqrt())
}

/// Diagonal of the Hessian of the perturbed one-norm: `eps / (v_i^2 + eps)^{3/2}`.
pub(crate) fn softsign_slope(v: &ParamVector, eps: f64) -> ParamVector {
    v.map(|x| {
        let s = x * x + eps;
        eps / (s * s.sqrt())
    })
}

/// `max_i |a_i - b_i|`.
pub fn linf_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}
