//! Memoryless iterations `theta <- theta - h [F^(n)(theta, ..., theta) + c^(n)(theta)]`.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::correction::{correction_preferred, CorrectionMethod, Regime};
use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::memoryful::MomentumState;
use crate::momentum::{frozen_update, require_smooth, Horizon, PointFeatures};
use crate::spec::{KSpec, OptimizerKind, OptimizerSpec};
use crate::trajectory::{drive, Trajectory};
use crate::vector::{softsign_slope, softsign_unchecked, ParamVector};

/// Which coefficients the correction uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionVariant {
    /// Exact step-`n` coefficients.
    #[default]
    FiniteN,
    /// The `n -> infinity` limit at every step.
    Asymptotic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemorylessKind {
    /// Correction dropped.
    FirstOrder,
    SecondOrder(CorrectionVariant),
}

impl Default for MemorylessKind {
    fn default() -> Self {
        MemorylessKind::SecondOrder(CorrectionVariant::FiniteN)
    }
}

impl MemorylessKind {
    pub const SECOND_ORDER: Self = MemorylessKind::SecondOrder(CorrectionVariant::FiniteN);

    pub fn name(self) -> &'static str {
        match self {
            MemorylessKind::FirstOrder => "first-order",
            MemorylessKind::SecondOrder(CorrectionVariant::FiniteN) => "second-order",
            MemorylessKind::SecondOrder(CorrectionVariant::Asymptotic) => "second-order-asymptotic",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            MemorylessKind::FirstOrder,
            MemorylessKind::SECOND_ORDER,
            MemorylessKind::SecondOrder(CorrectionVariant::Asymptotic),
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    fn regime(self, n: usize) -> Option<Regime> {
        match self {
            MemorylessKind::FirstOrder => None,
            MemorylessKind::SecondOrder(CorrectionVariant::FiniteN) => Some(Regime::Step(n)),
            MemorylessKind::SecondOrder(CorrectionVariant::Asymptotic) => Some(Regime::Asymptotic),
        }
    }
}

/// `F^(n)(theta, ..., theta)` with the step-`n` bias corrections.
pub fn frozen_direction(spec: &OptimizerSpec, loss: &dyn LossModel, theta: &ParamVector, n: usize) -> ParamVector {
    frozen_update(spec, &PointFeatures::new(loss, theta), Horizon::Step(n))
}

/// How the correction of a given kind is evaluated for `spec`, or `None`
/// for first-order iterations. Kinds without a closed form at finite `n`
/// fall back to the contraction.
pub fn correction_method_for(spec: &OptimizerSpec, kind: MemorylessKind) -> Option<CorrectionMethod> {
    match kind {
        MemorylessKind::FirstOrder => None,
        MemorylessKind::SecondOrder(CorrectionVariant::Asymptotic) => Some(CorrectionMethod::ClosedFormAsymptotic),
        MemorylessKind::SecondOrder(CorrectionVariant::FiniteN) => {
            let closed = match spec.kind {
                OptimizerKind::HeavyBall | OptimizerKind::LionK => true,
                OptimizerKind::AdamW => spec.bias_correction,
                OptimizerKind::Nesterov | OptimizerKind::NAdamW => false,
            };
            Some(if closed {
                CorrectionMethod::ClosedFormFiniteN
            } else {
                CorrectionMethod::Contraction
            })
        }
    }
}

/// The full memoryless direction: `F^(n)(theta, ..., theta)` plus the
/// correction for second-order kinds.
pub fn memoryless_direction(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    n: usize,
    kind: MemorylessKind,
) -> Result<ParamVector> {
    let mut f = frozen_direction(spec, loss, theta, n);
    if let Some(regime) = kind.regime(n) {
        f += &correction_preferred(spec, loss, theta, regime)?.vector;
    }
    Ok(f)
}

pub fn step_memoryless(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    n: usize,
    kind: MemorylessKind,
) -> Result<ParamVector> {
    let mut next = theta.clone();
    next.axpy(-spec.h, &memoryless_direction(spec, loss, theta, n, kind)?);
    if !loss.contains(&next) {
        return Err(Error::DomainExit {
            step: n + 1,
            norm: next.linf_norm(),
            radius: loss.domain_radius(),
        });
    }
    Ok(next)
}

pub fn run_memoryless_with(
    loss: &dyn LossModel,
    spec: &OptimizerSpec,
    theta0: ParamVector,
    horizon: f64,
    kind: MemorylessKind,
) -> Trajectory {
    drive(loss, spec.h, horizon, theta0, |n, theta| step_memoryless(spec, loss, theta, n, kind))
}

/// Runs the memoryless iteration from the same initial point as
/// [`crate::run_memoryful`]. A domain exit is recorded on the trajectory.
pub fn run_memoryless(config: &RunConfig, kind: MemorylessKind) -> Result<Trajectory> {
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    if kind != MemorylessKind::FirstOrder {
        require_smooth(&config.optimizer, "the second-order memoryless iteration")?;
    }
    Ok(run_memoryless_with(loss.as_ref(), &config.optimizer, theta0, config.horizon, kind))
}

/// `|theta^(n+1) - theta^(n) + h F^(n)(theta^(n), ..., theta^(0))|_inf` for
/// `n <= n_max`, with the memoryful update evaluated on the given iterates.
pub fn defects_along(loss: &dyn LossModel, spec: &OptimizerSpec, iterates: &[ParamVector], n_max: usize) -> Vec<f64> {
    let Some(first) = iterates.first() else {
        return Vec::new();
    };
    let mut state = MomentumState::new(*spec, first.len());
    iterates
        .windows(2)
        .take(n_max.saturating_add(1))
        .map(|w| {
            let f = state.advance(loss, &w[0]);
            let mut r = &w[1] - &w[0];
            r.axpy(spec.h, &f);
            r.linf_norm()
        })
        .collect()
}

pub fn one_step_defect_with(
    loss: &dyn LossModel,
    spec: &OptimizerSpec,
    theta0: ParamVector,
    horizon: f64,
    kind: MemorylessKind,
    n_max: usize,
) -> Result<Vec<f64>> {
    let traj = run_memoryless_with(loss, spec, theta0, horizon, kind).into_result()?;
    Ok(defects_along(loss, spec, &traj.iterates, n_max))
}

/// Defects of the second-order (finite-n) memoryless trajectory.
pub fn one_step_defect(config: &RunConfig, n_max: usize) -> Result<Vec<f64>> {
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    one_step_defect_with(
        loss.as_ref(),
        &config.optimizer,
        theta0,
        config.horizon,
        MemorylessKind::SECOND_ORDER,
        n_max,
    )
}

fn require_bias_corrected(spec: &OptimizerSpec, expected: OptimizerKind) -> Result<()> {
    if spec.kind != expected || !spec.bias_correction {
        return Err(Error::Unsupported(format!(
            "componentwise {expected} update needs a bias-corrected {expected} spec"
        )));
    }
    Ok(())
}

/// Componentwise memoryless AdamW step written out term by term:
/// `F_j = g_j / sqrt(g_j^2 + eps) + lambda theta_j` and the correction
/// built from `grad |grad L|_(1,eps) + lambda H theta`.
pub fn adamw_componentwise_step(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    n: usize,
) -> Result<ParamVector> {
    require_bias_corrected(spec, OptimizerKind::AdamW)?;
    let (h, eps, lambda) = (spec.h, spec.eps, spec.lambda);
    let g = loss.grad(theta);
    // grad of the smoothed one-norm of the gradient, and of lambda/2 |theta|^2 pushed through H
    let smooth_norm_grad = loss.hvp(theta, &softsign_unchecked(&g, eps));
    let decay_term = loss.hvp(theta, theta);
    let a = |b: f64| b / (1.0 - b) - (n + 1) as f64 * b.powi(n as i32 + 1) / (1.0 - b.powi(n as i32 + 1));
    let (a1, a2) = (a(spec.beta1), a(spec.beta2));
    let out = (0..theta.len())
        .map(|j| {
            let gj = g[j];
            let s = gj * gj + eps;
            let f = gj / s.sqrt() + lambda * theta[j];
            let inner = smooth_norm_grad[j] + lambda * decay_term[j];
            let m = -h * a2 * gj * gj * inner / s.powf(1.5) + h * a1 * inner / s.sqrt();
            theta[j] - h * f - h * m
        })
        .collect();
    ParamVector::new(out)
}

/// Componentwise memoryless step for bias-corrected Lion with the
/// `x / sqrt(x^2 + eps)` direction:
/// `M_j = h coef eps / (g_j^2 + eps)^(3/2) d_j [|grad L|_(1,eps) + lambda (g.theta - L)]`.
pub fn lion_componentwise_step(
    spec: &OptimizerSpec,
    loss: &dyn LossModel,
    theta: &ParamVector,
    n: usize,
) -> Result<ParamVector> {
    require_bias_corrected(spec, OptimizerKind::LionK)?;
    if spec.kspec != KSpec::SmoothedOneNorm {
        return Err(Error::Unsupported("componentwise Lion update needs the smoothed one-norm".into()));
    }
    let (h, eps, lambda, r1, r2) = (spec.h, spec.eps, spec.lambda, spec.beta1, spec.beta2);
    let g = loss.grad(theta);
    // d/dtheta (g.theta - L) = H theta
    let bracket_grad = loss.hvp(theta, &(softsign_unchecked(&g, eps) + &(theta * lambda)));
    let coef = r1 / (1.0 - r2) - (n + 1) as f64 * r2.powi(n as i32) * r1 / (1.0 - r2.powi(n as i32 + 1));
    let slope = softsign_slope(&g, eps);
    let out = (0..theta.len())
        .map(|j| {
            let f = g[j] / (g[j] * g[j] + eps).sqrt() + lambda * theta[j];
            let m = h * coef * slope[j] * bracket_grad[j];
            theta[j] - h * f - h * m
        })
        .collect();
    ParamVector::new(out)
}
