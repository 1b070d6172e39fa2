//! Loss fixtures with exact gradients and Hessian-vector products.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::vector::ParamVector;

pub const DEFAULT_DOMAIN_RADIUS: f64 = 1e3;
pub const DEFAULT_FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-12;

/// Differential oracle for a loss on the open box `|theta|_inf < domain_radius`.
pub trait LossModel: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &ParamVector) -> f64;
    fn grad(&self, theta: &ParamVector) -> ParamVector;
    /// `H(theta) v`.
    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> ParamVector;
    fn domain_radius(&self) -> f64;

    fn contains(&self, theta: &ParamVector) -> bool {
        theta.is_finite() && theta.linf_norm() < self.domain_radius()
    }
}

fn mat_vec(a: &DMatrix<f64>, v: &[f64]) -> ParamVector {
    let mut out = vec![0.0; a.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        for (o, &aij) in out.iter_mut().zip(a.column(j).iter()) {
            *o += aij * vj;
        }
    }
    ParamVector::from(out)
}

fn check_radius(r: f64) -> Result<f64> {
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(invalid("domain_radius", format!("must be finite and > 0, got {r}")))
    }
}

/// `L(theta) = theta^T A theta / 2 - b^T theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    a: DMatrix<f64>,
    b: ParamVector,
    radius: f64,
}

/// Builds a quadratic after checking that `a` is symmetric positive definite.
pub fn make_quadratic(a: DMatrix<f64>, b: ParamVector) -> Result<Quadratic> {
    let q = make_symmetric_quadratic(a, b)?;
    if q.a.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(q)
}

/// Like [`make_quadratic`] without the definiteness check; used for
/// mini-batch members whose Hessians are perturbations of a definite mean.
pub fn make_symmetric_quadratic(a: DMatrix<f64>, b: ParamVector) -> Result<Quadratic> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(invalid("A", format!("must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
    }
    if a.nrows() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.nrows(),
            right: b.len(),
        });
    }
    if a.iter().any(|x| !x.is_finite()) || !b.is_finite() {
        return Err(Error::NonFinite);
    }
    let scale = a.amax().max(1.0);
    let asym = (&a - a.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::Asymmetric(asym));
    }
    Ok(Quadratic {
        a,
        b,
        radius: DEFAULT_DOMAIN_RADIUS,
    })
}

impl Quadratic {
    pub fn with_domain_radius(mut self, r: f64) -> Result<Self> {
        self.radius = check_radius(r)?;
        Ok(self)
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &ParamVector {
        &self.b
    }

    /// The unique minimizer `A^{-1} b` (requires a definite `A`).
    pub fn minimizer(&self) -> Option<ParamVector> {
        let chol = self.a.clone().cholesky()?;
        let x = chol.solve(&DVector::from_column_slice(self.b.as_slice()));
        Some(ParamVector::from(x.as_slice().to_vec()))
    }
}

impl LossModel for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, theta: &ParamVector) -> f64 {
        0.5 * theta.dot(&mat_vec(&self.a, theta.as_slice())) - self.b.dot(theta)
    }

    fn grad(&self, theta: &ParamVector) -> ParamVector {
        mat_vec(&self.a, theta.as_slice()) - &self.b
    }

    fn hvp(&self, _theta: &ParamVector, v: &ParamVector) -> ParamVector {
        mat_vec(&self.a, v.as_slice())
    }

    fn domain_radius(&self) -> f64 {
        self.radius
    }
}

/// Random symmetric matrix with eigenvalues log-spaced in `[eig_min, eig_max]`
/// and a Haar-like random eigenbasis.
pub fn random_spd<R: Rng>(dim: usize, eig_min: f64, eig_max: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if dim == 0 {
        return Err(Error::EmptyVector);
    }
    if !(eig_min > 0.0) || !(eig_max >= eig_min) || !eig_max.is_finite() {
        return Err(invalid(
            "eig_min/eig_max",
            format!("need 0 < eig_min <= eig_max < inf, got {eig_min}, {eig_max}"),
        ));
    }
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let eig = DVector::from_fn(dim, |i, _| {
        if dim == 1 {
            eig_max
        } else {
            let t = i as f64 / (dim - 1) as f64;
            (eig_min.ln() + t * (eig_max.ln() - eig_min.ln())).exp()
        }
    });
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    Ok((&a + a.transpose()) * 0.5)
}

pub fn random_quadratic<R: Rng>(
    dim: usize,
    eig_min: f64,
    eig_max: f64,
    offset_scale: f64,
    rng: &mut R,
) -> Result<Quadratic> {
    let a = random_spd(dim, eig_min, eig_max, rng)?;
    let b: Vec<f64> = (0..dim)
        .map(|_| offset_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    make_quadratic(a, ParamVector::from(b))
}

/// Mean logistic loss with an optional ridge term.
#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    x: DMatrix<f64>,
    y: Vec<f64>,
    ridge: f64,
    radius: f64,
}

pub fn make_logistic(x: DMatrix<f64>, y: Vec<f64>, ridge: f64) -> Result<Logistic> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(invalid("X", "needs at least one row and one column"));
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    if let Some((index, &value)) = y.iter().enumerate().find(|(_, &v)| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidLabel { index, value });
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(invalid("ridge", format!("must be finite and >= 0, got {ridge}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(Logistic {
        x,
        y,
        ridge,
        radius: DEFAULT_DOMAIN_RADIUS,
    })
}

/// Gaussian features, labels from a random linear teacher with 10% of them
/// flipped so the data are not separable.
pub fn random_logistic<R: Rng>(samples: usize, dim: usize, ridge: f64, rng: &mut R) -> Result<Logistic> {
    if samples == 0 || dim == 0 {
        return Err(invalid("samples/dim", "must both be >= 1"));
    }
    let x = DMatrix::<f64>::from_fn(samples, dim, |_, _| rng.sample(StandardNormal));
    let teacher: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
        .collect();
    let y = (0..samples)
        .map(|i| {
            let z: f64 = (0..dim).map(|j| x[(i, j)] * teacher[j]).sum();
            let flip = rng.random::<f64>() < 0.1;
            if (z >= 0.0) != flip {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    make_logistic(x, y, ridge)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn with_domain_radius(mut self, r: f64) -> Result<Self> {
        self.radius = check_radius(r)?;
        Ok(self)
    }

    fn margins(&self, theta: &ParamVector) -> Vec<f64> {
        let t = theta.as_slice();
        (0..self.x.nrows())
            .map(|i| self.x.row(i).iter().zip(t).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `sum_i w_i x_i / m`.
    fn weighted_rows(&self, w: &[f64]) -> ParamVector {
        let m = self.x.nrows() as f64;
        let mut out = vec![0.0; self.x.ncols()];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.x.column(j).iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / m;
        }
        ParamVector::from(out)
    }
}

impl LossModel for Logistic {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn value(&self, theta: &ParamVector) -> f64 {
        let z = self.margins(theta);
        let data: f64 = z.iter().zip(&self.y).map(|(z, y)| softplus(-y * z)).sum::<f64>()
            / self.y.len() as f64;
        data + 0.5 * self.ridge * theta.norm_sq()
    }

    fn grad(&self, theta: &ParamVector) -> ParamVector {
        let z = self.margins(theta);
        let w: Vec<f64> = z.iter().zip(&self.y).map(|(z, y)| -y * sigmoid(-y * z)).collect();
        let mut g = self.weighted_rows(&w);
        g.axpy(self.ridge, theta);
        g
    }

    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> ParamVector {
        let z = self.margins(theta);
        let xv = self.margins(v);
        let w: Vec<f64> = z
            .iter()
            .zip(&xv)
            .map(|(z, xv)| sigmoid(*z) * sigmoid(-z) * xv)
            .collect();
        let mut out = self.weighted_rows(&w);
        out.axpy(self.ridge, v);
        out
    }

    fn domain_radius(&self) -> f64 {
        self.radius
    }
}

/// `L(theta) = a/4 sum_i theta_i^4`; the Hessian vanishes at the origin and
/// grows away from it, so correction terms depend on where they are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Quartic {
    a: f64,
    dim: usize,
    radius: f64,
}

pub fn make_quartic(a: f64, dim: usize) -> Result<Quartic> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(invalid("a", format!("must be finite and > 0, got {a}")));
    }
    if dim == 0 {
        return Err(Error::EmptyVector);
    }
    Ok(Quartic {
        a,
        dim,
        radius: DEFAULT_DOMAIN_RADIUS,
    })
}

pub fn make_scalar_quartic(a: f64) -> Result<Quartic> {
    make_quartic(a, 1)
}

impl Quartic {
    pub fn with_domain_radius(mut self, r: f64) -> Result<Self> {
        self.radius = check_radius(r)?;
        Ok(self)
    }
}

impl LossModel for Quartic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &ParamVector) -> f64 {
        0.25 * self.a * theta.iter().map(|t| t.powi(4)).sum::<f64>()
    }

    fn grad(&self, theta: &ParamVector) -> ParamVector {
        theta.map(|t| self.a * t * t * t)
    }

    fn hvp(&self, theta: &ParamVector, v: &ParamVector) -> ParamVector {
        theta.zip_map(v, |t, v| 3.0 * self.a * t * t * v)
    }

    fn domain_radius(&self) -> f64 {
        self.radius
    }
}

fn rel_err(approx: f64, exact: f64) -> f64 {
    (approx - exact).abs() / exact.abs().max(FD_FLOOR)
}

/// Worst componentwise relative error of `grad` against central
/// differences of `value`.
pub fn fd_check_grad(loss: &dyn LossModel, theta: &ParamVector, step: f64) -> f64 {
    let g = loss.grad(theta);
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += step;
        minus[i] -= step;
        let fd = (loss.value(&plus) - loss.value(&minus)) / (2.0 * step);
        worst = worst.max(rel_err(fd, g[i]));
    }
    worst
}

/// Worst componentwise relative error of `hvp(theta, v)` against central
/// differences of `grad` along `v`.
pub fn fd_check_hvp(loss: &dyn LossModel, theta: &ParamVector, v: &ParamVector, step: f64) -> f64 {
    let hv = loss.hvp(theta, v);
    let mut plus = theta.clone();
    plus.axpy(step, v);
    let mut minus = theta.clone();
    minus.axpy(-step, v);
    let fd = (loss.grad(&plus) - loss.grad(&minus)) * (0.5 / step);
    fd.iter()
        .zip(hv.iter())
        .fold(0.0, |m: f64, (&a, &e)| m.max(rel_err(a, e)))
}

/// Dense Hessian assembled column by column from `hvp`.
pub fn dense_hessian(loss: &dyn LossModel, theta: &ParamVector) -> DMatrix<f64> {
    let d = loss.dim();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let col = loss.hvp(theta, &ParamVector::basis(d, j));
        for i in 0..d {
            h[(i, j)] = col[i];
        }
    }
    h
}

/// `max_ij |e_i^T H e_j - e_j^T H e_i|`.
pub fn hessian_asymmetry(loss: &dyn LossModel, theta: &ParamVector) -> f64 {
    let h = dense_hessian(loss, theta);
    (&h - h.transpose()).amax()
}

/// Quadratic mini-batch losses `L_k` whose average is the full-batch loss.
#[derive(Clone, Debug)]
pub struct MiniBatchFamily {
    batches: Vec<Quadratic>,
    mean: Quadratic,
}

impl MiniBatchFamily {
    pub fn new(batches: Vec<Quadratic>) -> Result<Self> {
        if batches.len() < 2 {
            return Err(invalid("count", format!("need at least 2 batches, got {}", batches.len())));
        }
        let d = batches[0].dim();
        if let Some(bad) = batches.iter().find(|q| q.dim() != d) {
            return Err(Error::LengthMismatch {
                left: d,
                right: bad.dim(),
            });
        }
        let k = batches.len() as f64;
        let mut a = DMatrix::zeros(d, d);
        let mut b = ParamVector::zeros(d);
        for q in &batches {
            a += &q.a;
            b += &q.b;
        }
        let mean = make_symmetric_quadratic(a / k, b * (1.0 / k))?;
        Ok(Self { batches, mean })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub fn batch(&self, k: usize) -> &Quadratic {
        &self.batches[k]
    }

    pub fn batches(&self) -> &[Quadratic] {
        &self.batches
    }

    /// The full-batch loss with averaged Hessian and offset.
    pub fn mean_loss(&self) -> &Quadratic {
        &self.mean
    }

    pub fn grad(&self, k: usize, theta: &ParamVector) -> ParamVector {
        self.batches[k].grad(theta)
    }

    /// Jacobian of the `k`-th gradient map applied to `v`.
    pub fn jvp(&self, k: usize, theta: &ParamVector, v: &ParamVector) -> ParamVector {
        self.batches[k].hvp(theta, v)
    }

    /// Arithmetic average of the member gradients.
    pub fn mean_grad(&self, theta: &ParamVector) -> ParamVector {
        let mut g = ParamVector::zeros(theta.len());
        for q in &self.batches {
            g += &q.grad(theta);
        }
        g * (1.0 / self.len() as f64)
    }
}

/// `count` quadratic batches around a random definite mean. Each member's
/// Hessian and offset deviate from the mean by `spread` times a zero-mean
/// random perturbation.
pub fn make_minibatch_quadratics(count: usize, dim: usize, spread: f64, seed: u64) -> Result<MiniBatchFamily> {
    use crate::rng::{stream_rng, Stream};
    if count < 2 {
        return Err(invalid("count", format!("need at least 2 batches, got {count}")));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(invalid("spread", format!("must be finite and >= 0, got {spread}")));
    }
    let mut rng = stream_rng(seed, Stream::Loss);
    let base = random_quadratic(dim, 0.5, 2.0, 1.0, &mut rng)?;
    let mut da: Vec<DMatrix<f64>> = (0..count)
        .map(|_| {
            let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
            (&g + g.transpose()) * (0.5 / (dim as f64).sqrt())
        })
        .collect();
    let mut db: Vec<DVector<f64>> = (0..count)
        .map(|_| DVector::from_fn(dim, |_, _| rng.sample(StandardNormal)))
        .collect();
    let ma = da.iter().fold(DMatrix::zeros(dim, dim), |s, m| s + m) / count as f64;
    let mb = db.iter().fold(DVector::zeros(dim), |s, v| s + v) / count as f64;
    for m in &mut da {
        *m -= &ma;
    }
    for v in &mut db {
        *v -= &mb;
    }
    let batches = da
        .into_iter()
        .zip(db)
        .map(|(ea, eb)| {
            let a = base.hessian() + ea * spread;
            let a = (&a + a.transpose()) * 0.5;
            let b: Vec<f64> = base
                .offset()
                .iter()
                .zip(eb.iter())
                .map(|(b, e)| b + spread * e)
                .collect();
            make_symmetric_quadratic(a, ParamVector::from(b))
        })
        .collect::<Result<Vec<_>>>()?;
    MiniBatchFamily::new(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> ParamVector {
        ParamVector::from((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
    }

    #[test]
    fn quadratic_identity_example() {
        let q = make_quadratic(DMatrix::identity(2, 2), ParamVector::zeros(2)).unwrap();
        let t = pv(&[1.0, 2.0]);
        assert_eq!(q.value(&t), 2.5);
        assert_eq!(q.grad(&t), t);
    }

    #[test]
    fn quadratic_rejects_bad_matrices() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            make_quadratic(asym, ParamVector::zeros(2)),
            Err(Error::Asymmetric(_))
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            make_quadratic(indefinite, ParamVector::zeros(2)),
            Err(Error::NotPositiveDefinite)
        );
    }

    #[test]
    fn quadratic_hvp_ignores_theta() {
        let mut rng = stream_rng(1, Stream::Loss);
        let q = random_quadratic(5, 0.1, 10.0, 1.0, &mut rng).unwrap();
        let v = random_point(&mut rng, 5, 1.0);
        let a = q.hvp(&random_point(&mut rng, 5, 1.0), &v);
        let b = q.hvp(&random_point(&mut rng, 5, 1.0), &v);
        assert_eq!(a, b);
    }

    #[test]
    fn random_spd_has_requested_spectrum() {
        let mut rng = stream_rng(3, Stream::Loss);
        let a = random_spd(6, 0.01, 1.0, &mut rng).unwrap();
        let mut eig: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 0.01).abs() < 1e-12);
        assert!((eig[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_minimizer_is_stationary() {
        let mut rng = stream_rng(4, Stream::Loss);
        let q = random_quadratic(4, 0.5, 3.0, 1.0, &mut rng).unwrap();
        let x = q.minimizer().unwrap();
        assert!(q.grad(&x).linf_norm() < 1e-12);
    }

    #[test]
    fn logistic_at_origin_is_log_two() {
        let mut rng = stream_rng(5, Stream::Loss);
        let l = random_logistic(30, 4, 0.3, &mut rng).unwrap();
        assert!((l.value(&ParamVector::zeros(4)) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logistic_rejects_bad_labels() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert_eq!(
            make_logistic(x, vec![1.0, 0.0], 0.0),
            Err(Error::InvalidLabel { index: 1, value: 0.0 })
        );
    }

    #[test]
    fn logistic_gradient_vanishes_along_separating_direction() {
        // rows (1, 0) labelled +1 and (-1, 0) labelled -1 are separated by e_1
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -1.0, 0.7]);
        let l = make_logistic(x, vec![1.0, -1.0], 0.0).unwrap();
        let small = l.grad(&pv(&[5.0, 0.0])).linf_norm();
        let large = l.grad(&pv(&[40.0, 0.0])).linf_norm();
        assert!(large < small * 1e-10);
        assert!(large < 1e-15);
    }

    #[test]
    fn quartic_examples() {
        let q = make_scalar_quartic(1.0).unwrap();
        assert_eq!(q.value(&pv(&[2.0])), 4.0);
        assert_eq!(q.grad(&pv(&[2.0])), pv(&[8.0]));
        assert_eq!(q.grad(&pv(&[0.0])), pv(&[0.0]));
        assert_eq!(q.hvp(&pv(&[0.0]), &pv(&[1.0])), pv(&[0.0]));
        assert!(make_scalar_quartic(0.0).is_err());
    }

    #[test]
    fn finite_difference_checks_on_fixtures() {
        let mut rng = stream_rng(6, Stream::Probe);
        let q = random_quadratic(6, 0.1, 10.0, 1.0, &mut stream_rng(6, Stream::Loss)).unwrap();
        let l = random_logistic(50, 6, 0.01, &mut stream_rng(7, Stream::Loss)).unwrap();
        let c = make_quartic(1.5, 6).unwrap();
        for _ in 0..10 {
            let t = random_point(&mut rng, 6, 1.0);
            let v = random_point(&mut rng, 6, 1.0);
            assert!(fd_check_hvp(&q, &t, &v, DEFAULT_FD_STEP) <= 1e-9);
            assert!(fd_check_grad(&l, &t, DEFAULT_FD_STEP) <= 1e-5);
            assert!(fd_check_hvp(&l, &t, &v, DEFAULT_FD_STEP) <= 1e-5);
            assert!(fd_check_hvp(&c, &t, &v, DEFAULT_FD_STEP) <= 1e-6);
        }
        // the quartic needs points away from zero for a relative check
        for t in [0.5, 1.0, -2.0] {
            let t = pv(&[t]);
            let c = make_scalar_quartic(1.0).unwrap();
            assert!(fd_check_grad(&c, &t, DEFAULT_FD_STEP) <= 1e-6);
        }
    }

    #[test]
    fn gradient_of_half_squared_gradient_norm() {
        // H g = grad |g|^2 / 2
        let mut rng = stream_rng(8, Stream::Probe);
        let l = random_logistic(40, 3, 0.1, &mut stream_rng(8, Stream::Loss)).unwrap();
        let c = make_quartic(0.7, 3).unwrap();
        let models: [&dyn LossModel; 2] = [&l, &c];
        for m in models {
            let t = random_point(&mut rng, 3, 1.0);
            let hg = m.hvp(&t, &m.grad(&t));
            for i in 0..3 {
                let s = 1e-5;
                let mut p = t.clone();
                let mut q = t.clone();
                p[i] += s;
                q[i] -= s;
                let fd = (m.grad(&p).norm_sq() - m.grad(&q).norm_sq()) / (4.0 * s);
                assert!((fd - hg[i]).abs() <= 1e-5 * hg[i].abs().max(1e-3), "{fd} vs {}", hg[i]);
            }
        }
    }

    #[test]
    fn minibatch_mean_is_average_of_members() {
        let fam = make_minibatch_quadratics(6, 4, 0.5, 11).unwrap();
        let mut rng = stream_rng(11, Stream::Probe);
        for _ in 0..10 {
            let t = random_point(&mut rng, 4, 1.0);
            let gap = (fam.mean_loss().grad(&t) - fam.mean_grad(&t)).linf_norm();
            assert!(gap <= 1e-12);
        }
    }

    #[test]
    fn zero_spread_batches_are_identical() {
        let fam = make_minibatch_quadratics(4, 3, 0.0, 2).unwrap();
        for k in 1..4 {
            assert_eq!(fam.batch(k), fam.batch(0));
        }
    }

    #[test]
    fn gradient_noise_grows_with_spread() {
        let t = pv(&[0.3, -0.2, 0.9]);
        let noise = |spread: f64| {
            let fam = make_minibatch_quadratics(6, 3, spread, 9).unwrap();
            let g = fam.mean_grad(&t);
            (0..fam.len()).map(|k| (fam.grad(k, &t) - &g).norm_sq()).sum::<f64>() / 6.0
        };
        let levels: Vec<f64> = [0.0, 0.1, 0.5, 1.0].iter().map(|&s| noise(s)).collect();
        assert!(levels[0] < 1e-24);
        assert!(levels.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn hessians_are_symmetric(seed in 0u64..1000, d in 1usize..6) {
            let mut rng = stream_rng(seed, Stream::Loss);
            let q = random_quadratic(d, 0.1, 10.0, 1.0, &mut rng).unwrap();
            let l = random_logistic(20, d, 0.1, &mut rng).unwrap();
            let c = make_quartic(2.0, d).unwrap();
            let t = random_point(&mut rng, d, 1.0);
            prop_assert!(hessian_asymmetry(&q, &t) <= 1e-10);
            prop_assert!(hessian_asymmetry(&l, &t) <= 1e-10);
            prop_assert!(hessian_asymmetry(&c, &t) <= 1e-10);
        }

        #[test]
        fn quadratic_gradient_matches_differences(seed in 0u64..1000) {
            let mut rng = stream_rng(seed, Stream::Loss);
            let q = random_quadratic(4, 0.5, 5.0, 1.0, &mut rng).unwrap();
            let t = random_point(&mut rng, 4, 1.0);
            let g = q.grad(&t);
            // use an absolute floor at the gradient's scale: components can sit near zero
            for i in 0..4 {
                let mut p = t.clone();
                let mut m = t.clone();
                p[i] += 1e-5;
                m[i] -= 1e-5;
                let fd = (q.value(&p) - q.value(&m)) / 2e-5;
                prop_assert!((fd - g[i]).abs() <= 1e-7 * g.linf_norm().max(1.0));
            }
        }
    }
}
