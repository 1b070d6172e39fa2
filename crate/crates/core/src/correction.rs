//! The memory-correction function
//!
//! ```text
//! c_r^(n)(theta) = h sum_{k=1}^{n} dF_r^(n)/dtheta^(n-k) (theta) . sum_{s=n-k}^{n-1} F^(s)(theta)
//! ```
//!
//! with every argument frozen at `theta`, evaluated three ways: the general
//! double sum, the same sum contracted through the momentum variables, and
//! per-optimizer closed forms.

use std::io::{self, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::momentum::{channels, frozen_update, k_grad, k_hess_diag, require_smooth, Horizon, PointFeatures};
use crate::spec::{OptimizerKind, OptimizerSpec};
use crate::vector::{softsign_slope, softsign_unchecked, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMethod {
    BruteForce,
    Contraction,
    ClosedFormAsymptotic,
    ClosedFormFiniteN,
}

impl CorrectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            CorrectionMethod::BruteForce => "brute-force",
            CorrectionMethod::Contraction => "contraction",
            CorrectionMethod::ClosedFormAsymptotic => "closed-form-asymptotic",
            CorrectionMethod::ClosedFormFiniteN => "closed-form-finite-n",
        }
    }
}

/// Step `n` with its exact coefficients, or the `n -> infinity` limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Step(usize),
    Asymptotic,
}

impl Regime {
    fn horizon(self) -> Horizon {
        match self {
            Regime::Step(n) => Horizon::Step(n),
            Regime::Asymptotic => Horizon::Limit,
        }
    }

    fn step(self) -> Option<usize> {
        match self {
            Regime::Step(n) => Some(n),
            Regime::Asymptotic => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionTerm {
    pub vector: ParamVector,
    /// `None` for asymptotic values.
    pub n: Option<usize>,
    pub method: CorrectionMethod,
}

fn term(vector: ParamVector, regime: Regime, method: CorrectionMethod) -> CorrectionTerm {
    CorrectionTerm {
        vector,
        n: regime.step(),
        method,
    }
}

fn wrong_kind(expected: OptimizerKind, spec: &OptimizerSpec) -> Error {
    Error::Unsupported(format!("{expected} closed form requested for a {} spec", spec.kind))
}

/// The double sum, one lag at a time. Inner sums of `F^(s)` use that step's
/// own bias-correction values and are accumulated as running prefix sums.
/// Costs one Hessian-vector product per lag.
pub fn correction_bruteforce(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    n: usize,
) -> Result<CorrectionTerm> {
    require_smooth(spec, "the correction term")?;
    let regime = Regime::Step(n);
    if n == 0 {
        return Ok(term(ParamVector::zeros(theta.len()), regime, CorrectionMethod::BruteForce));
    }
    let point = PointFeatures::new(loss, theta);
    let chans = channels(spec, Horizon::Step(n));
    let moments = point.frozen_moments(&chans, Horizon::Step(n));
    let needs_hvp = chans.iter().any(|c| c.feature.needs_hessian() && c.weights.tail != 0.0);
    let mut window = ParamVector::zeros(theta.len());
    let mut acc = ParamVector::zeros(theta.len());
    for k in 1..=n {
        window += &frozen_update(spec, &point, Horizon::Step(n - k));
        let hv = if needs_hvp {
            loss.hvp(theta, &window)
        } else {
            ParamVector::zeros(theta.len())
        };
        for (l, c) in chans.iter().enumerate() {
            let w = c.weights.at(k);
            if w == 0.0 {
                continue;
            }
            let jf = c.feature.jvp(&point.grad, &hv, &window);
            acc.axpy(w, &crate::momentum::combine_jvp(spec, &moments, l, &jf)?);
        }
    }
    Ok(term(acc * spec.h, regime, CorrectionMethod::BruteForce))
}

/// The same sum with the lag weights pushed inside: one weighted window sum
/// per momentum variable, then at most one Hessian-vector product each.
pub fn correction_contraction(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    regime: Regime,
) -> Result<CorrectionTerm> {
    require_smooth(spec, "the correction term")?;
    let point = PointFeatures::new(loss, theta);
    let horizon = regime.horizon();
    let chans = channels(spec, horizon);
    let moments = point.frozen_moments(&chans, horizon);
    let inputs: Vec<Option<ParamVector>> = match regime {
        Regime::Step(n) => {
            let mut sums: Vec<ParamVector> = vec![ParamVector::zeros(theta.len()); chans.len()];
            let mut window = ParamVector::zeros(theta.len());
            for k in 1..=n {
                window += &frozen_update(spec, &point, Horizon::Step(n - k));
                for (s, c) in sums.iter_mut().zip(&chans) {
                    let w = c.weights.at(k);
                    if w != 0.0 {
                        s.axpy(w, &window);
                    }
                }
            }
            sums.into_iter()
                .zip(&chans)
                .map(|(s, c)| (c.weights.tail != 0.0 && n > 0).then_some(s))
                .collect()
        }
        Regime::Asymptotic => {
            let f = frozen_update(spec, &point, Horizon::Limit);
            chans
                .iter()
                .map(|c| {
                    let m = c.weights.limit_first_moment();
                    (m != 0.0).then(|| &f * m)
                })
                .collect()
        }
    };
    let v = point.apply_chain(loss, spec, &chans, &moments, &inputs)?;
    Ok(term(v * spec.h, regime, CorrectionMethod::Contraction))
}

fn closed_method(regime: Regime) -> CorrectionMethod {
    match regime {
        Regime::Step(_) => CorrectionMethod::ClosedFormFiniteN,
        Regime::Asymptotic => CorrectionMethod::ClosedFormAsymptotic,
    }
}

/// Coefficient of `h H grad L` in the heavy-ball correction:
/// `beta [1 - (2n+1) beta^n (1-beta) - beta^(2n+1)] / (1-beta)^3`, or
/// `beta / (1-beta)^3` in the limit.
pub fn heavy_ball_coefficient(beta: f64, regime: Regime) -> f64 {
    let d = (1.0 - beta).powi(3);
    match regime {
        // the bracket cancels down to O((1-beta)^3) while n (1-beta) is small;
        // sum the positive series there and for short histories (exact at n = 1)
        Regime::Step(n) if n <= 64 || ((2 * n + 1) as f64) * (1.0 - beta) < 1.0 => {
            beta * heavy_ball_series(beta, n)
        }
        Regime::Step(n) => {
            let n = n as i32;
            beta * (1.0 - (2 * n + 1) as f64 * beta.powi(n) * (1.0 - beta) - beta.powi(2 * n + 1)) / d
        }
        Regime::Asymptotic => beta / d,
    }
}

/// `sum_{k=1}^{n} beta^(k-1) sum_{s=n-k}^{n-1} sum_{j=0}^{s} beta^j`.
fn heavy_ball_series(beta: f64, n: usize) -> f64 {
    // partial[s] = sum_{j<=s} beta^j
    let mut partial = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut p = 1.0;
    for _ in 0..n {
        acc += p;
        p *= beta;
        partial.push(acc);
    }
    let (mut window, mut total, mut bk) = (0.0, 0.0, 1.0);
    for k in 1..=n {
        window += partial[n - k];
        total += bk * window;
        bk *= beta;
    }
    total
}

/// `h coef / 2 * grad |grad L|^2`, with `grad |grad L|^2 = 2 H grad L`.
pub fn correction_closed_heavyball(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    regime: Regime,
) -> Result<CorrectionTerm> {
    if spec.kind != OptimizerKind::HeavyBall {
        return Err(wrong_kind(OptimizerKind::HeavyBall, spec));
    }
    let coef = heavy_ball_coefficient(spec.beta1, regime);
    let grad_sq_norm_grad = loss.hvp(theta, &loss.grad(theta)) * 2.0;
    Ok(term(grad_sq_norm_grad * (spec.h * coef / 2.0), regime, closed_method(regime)))
}

/// Only the limit is available in closed form:
/// `h beta^2 / (2 (1-beta)^3) grad |grad L|^2`.
pub fn correction_closed_nesterov(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
) -> Result<CorrectionTerm> {
    if spec.kind != OptimizerKind::Nesterov {
        return Err(wrong_kind(OptimizerKind::Nesterov, spec));
    }
    let b = spec.beta1;
    let coef = b * b / (2.0 * (1.0 - b).powi(3));
    let grad_sq_norm_grad = loss.hvp(theta, &loss.grad(theta)) * 2.0;
    Ok(term(
        grad_sq_norm_grad * (spec.h * coef),
        Regime::Asymptotic,
        CorrectionMethod::ClosedFormAsymptotic,
    ))
}

/// `beta / (1-beta) - (n+1) beta^(n+1) / (1 - beta^(n+1))`, or `beta / (1-beta)`.
pub fn adam_coefficient(beta: f64, regime: Regime) -> f64 {
    let limit = beta / (1.0 - beta);
    match regime {
        Regime::Step(n) => {
            let p = beta.powi(n as i32 + 1);
            limit - (n + 1) as f64 * p / (1.0 - p)
        }
        Regime::Asymptotic => limit,
    }
}

/// Componentwise
/// `c_r = h (a1 - a2 + eps a2 / (g_r^2 + eps)) [H (softsign(g) + lambda theta)]_r / sqrt(g_r^2 + eps)`
/// where `a1`, `a2` are the first- and second-moment coefficients. NAdamW
/// shares the form with `a1 = beta1^2 / (1 - beta1)` in the limit.
pub fn correction_closed_adamw(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    regime: Regime,
) -> Result<CorrectionTerm> {
    let a1 = match (spec.kind, regime) {
        (OptimizerKind::AdamW, _) => adam_coefficient(spec.beta1, regime),
        (OptimizerKind::NAdamW, Regime::Asymptotic) => spec.beta1 * spec.beta1 / (1.0 - spec.beta1),
        (OptimizerKind::NAdamW, Regime::Step(_)) => {
            return Err(Error::Unsupported("finite-n closed form for nadamw".into()))
        }
        _ => return Err(wrong_kind(OptimizerKind::AdamW, spec)),
    };
    if matches!(regime, Regime::Step(_)) && !spec.bias_correction {
        return Err(Error::Unsupported(
            "finite-n adamw closed form assumes bias correction".into(),
        ));
    }
    let a2 = adam_coefficient(spec.beta2, regime);
    let eps = spec.eps;
    let g = loss.grad(theta);
    let mut hv = loss.hvp(theta, &softsign_unchecked(&g, eps));
    if spec.lambda != 0.0 {
        hv.axpy(spec.lambda, &loss.hvp(theta, theta));
    }
    let v = g.zip_map(&hv, |g, hv| {
        let s = g * g + eps;
        spec.h * (a1 - a2 + eps * a2 / s) * hv / s.sqrt()
    });
    Ok(term(v, regime, closed_method(regime)))
}

/// `c = h coef HessK(-g) H (-gradK(-g) + lambda theta)` for the
/// bias-corrected variant and in the limit; without bias correction the
/// finite-n form keeps the per-step frozen updates inside one Hessian-vector
/// product.
pub fn correction_closed_lionk(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    regime: Regime,
) -> Result<CorrectionTerm> {
    if spec.kind != OptimizerKind::LionK {
        return Err(wrong_kind(OptimizerKind::LionK, spec));
    }
    require_smooth(spec, "the Lion-K closed-form correction")?;
    let (r1, r2, eps, k) = (spec.beta1, spec.beta2, spec.eps, spec.kspec);
    let g = loss.grad(theta);
    let neg_g = -&g;
    let update_at = |scale: f64| {
        let mut f = -k_grad(k, eps, &(&neg_g * scale));
        f.axpy(spec.lambda, theta);
        f
    };
    let v = match regime {
        Regime::Step(n) if !spec.bias_correction => {
            let mut acc = ParamVector::zeros(theta.len());
            for s in 0..n {
                let w = r2.powi((n - s - 1) as i32) * (1.0 - r2.powi(s as i32 + 1)) / (1.0 - r2);
                acc.axpy(w, &update_at(1.0 - r1 * r2.powi(s as i32)));
            }
            let curvature = k_hess_diag(k, eps, &(&neg_g * (1.0 - r1 * r2.powi(n as i32))))?;
            curvature.hadamard(&loss.hvp(theta, &acc)) * (spec.h * r1 * (1.0 - r2))
        }
        _ => {
            let coef = match regime {
                Regime::Step(n) => {
                    r1 / (1.0 - r2) - (n + 1) as f64 * r2.powi(n as i32) * r1 / (1.0 - r2.powi(n as i32 + 1))
                }
                Regime::Asymptotic => r1 / (1.0 - r2),
            };
            let curvature = k_hess_diag(k, eps, &neg_g)?;
            curvature.hadamard(&loss.hvp(theta, &update_at(1.0))) * (spec.h * coef)
        }
    };
    Ok(term(v, regime, closed_method(regime)))
}

/// Closed form for any kind, or [`Error::Unsupported`] where none exists
/// (Nesterov and NAdamW at finite n, AdamW at finite n without bias
/// correction).
pub fn correction_closed(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    regime: Regime,
) -> Result<CorrectionTerm> {
    match spec.kind {
        OptimizerKind::HeavyBall => correction_closed_heavyball(spec, loss, theta, regime),
        OptimizerKind::Nesterov => match regime {
            Regime::Asymptotic => correction_closed_nesterov(spec, loss, theta),
            Regime::Step(_) => Err(Error::Unsupported("finite-n closed form for nesterov".into())),
        },
        OptimizerKind::AdamW | OptimizerKind::NAdamW => correction_closed_adamw(spec, loss, theta, regime),
        OptimizerKind::LionK => correction_closed_lionk(spec, loss, theta, regime),
    }
}

/// Closed form when one exists, otherwise the (exact) contraction.
pub fn correction_preferred(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    regime: Regime,
) -> Result<CorrectionTerm> {
    match correction_closed(spec, loss, theta, regime) {
        Err(Error::Unsupported(_)) => correction_contraction(spec, loss, theta, regime),
        other => other,
    }
}

/// Relative l-inf gap between the limit corrections of Adam with
/// `beta1 = beta2 = beta` and Signum (Lion with `rho1 = rho2 = beta`).
pub fn signum_adam_identity_gap(
    beta: f64,
    loss: &dyn LossModel,
    theta: &ParamVector,
    eps: f64,
    lambda: f64,
) -> Result<f64> {
    let adam = OptimizerSpec::adamw(1.0, beta, beta, lambda, eps);
    adam.validate()?;
    let a = correction_closed_adamw(&adam, loss, theta, Regime::Asymptotic)?.vector;
    // Lion side written through grad [ |g|_{1,eps} + lambda (g . theta - L) ]
    let g = loss.grad(theta);
    let mut hv = loss.hvp(theta, &softsign_unchecked(&g, eps));
    if lambda != 0.0 {
        hv.axpy(lambda, &loss.hvp(theta, theta));
    }
    let l = softsign_slope(&g, eps).hadamard(&hv) * (beta / (1.0 - beta));
    let scale = a.linf_norm().max(l.linf_norm());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((a - l).linf_norm() / scale)
}

/// Heavy-ball's modified loss `L + h beta / (2 (1-beta)^2) |grad L|^2`;
/// the memoryless heavy-ball iteration is gradient descent on it with step
/// `h / (1 - beta)`, up to higher-order terms.
pub fn heavy_ball_modified_loss(loss: &dyn LossModel, theta: &ParamVector, h: f64, beta: f64) -> f64 {
    loss.value(theta) + h * beta / (2.0 * (1.0 - beta).powi(2)) * loss.grad(theta).norm_sq()
}

/// One entry of a correction table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrRow {
    pub method: CorrectionMethod,
    pub kind: OptimizerKind,
    pub n: Option<usize>,
    pub component: usize,
    pub value: f64,
}

/// Every available method at each requested step, plus the limit.
pub fn corr_table(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    steps: &[usize],
) -> Result<Vec<CorrRow>> {
    let mut terms = Vec::new();
    for &n in steps {
        terms.push(correction_bruteforce(spec, loss, theta, n)?);
        terms.push(correction_contraction(spec, loss, theta, Regime::Step(n))?);
        match correction_closed(spec, loss, theta, Regime::Step(n)) {
            Ok(t) => terms.push(t),
            Err(Error::Unsupported(_)) => {}
            Err(e) => return Err(e),
        }
    }
    terms.push(correction_contraction(spec, loss, theta, Regime::Asymptotic)?);
    terms.push(correction_closed(spec, loss, theta, Regime::Asymptotic)?);
    Ok(terms
        .into_iter()
        .flat_map(|t| {
            let (method, n, kind) = (t.method, t.n, spec.kind);
            t.vector
                .into_vec()
                .into_iter()
                .enumerate()
                .map(move |(component, value)| CorrRow {
                    method,
                    kind,
                    n,
                    component,
                    value,
                })
        })
        .collect())
}

/// CSV with columns `method,kind,n,component,value`; `n` is `inf` for limits.
pub fn write_corr_table<W: Write>(rows: &[CorrRow], mut w: W) -> io::Result<()> {
    writeln!(w, "method,kind,n,component,value")?;
    for r in rows {
        let n = r.n.map_or_else(|| "inf".to_string(), |n| n.to_string());
        writeln!(w, "{},{},{},{},{}", r.method.name(), r.kind, n, r.component, r.value)?;
    }
    Ok(())
}
