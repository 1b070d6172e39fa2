//! Every supported optimizer written as `F = Q(m_1, ..., m_Q)` where each
//! momentum variable is a weighted sum over lags of one feature map:
//! `m_l = sum_k w_l(k) f_l(theta^(n-k))`.
//!
//! The memoryful state machine, the correction engine and the modified
//! equation all read this one description.

use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::spec::{KSpec, OptimizerKind, OptimizerSpec};
use crate::vector::{softsign_slope, softsign_unchecked, ParamVector};

/// The map a momentum variable averages over past iterates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Feature {
    Grad,
    GradSquared,
    NegGrad,
    Theta,
}

impl Feature {
    pub(crate) fn eval(self, theta: &ParamVector, grad: &ParamVector) -> ParamVector {
        match self {
            Feature::Grad => grad.clone(),
            Feature::GradSquared => grad.hadamard(grad),
            Feature::NegGrad => -grad,
            Feature::Theta => theta.clone(),
        }
    }

    /// Jacobian of the feature applied to `v`, given `hv = H(theta) v`.
    pub(crate) fn jvp(self, grad: &ParamVector, hv: &ParamVector, v: &ParamVector) -> ParamVector {
        match self {
            Feature::Grad => hv.clone(),
            Feature::GradSquared => grad.zip_map(hv, |g, x| 2.0 * g * x),
            Feature::NegGrad => -hv,
            Feature::Theta => v.clone(),
        }
    }

    pub(crate) fn needs_hessian(self) -> bool {
        !matches!(self, Feature::Theta)
    }
}

/// Lag weights `w(0) = lead`, `w(k) = tail * decay^(k-1)` for `k >= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LagWeights {
    pub lead: f64,
    pub tail: f64,
    pub decay: f64,
}

impl LagWeights {
    fn current(lead: f64) -> Self {
        Self {
            lead,
            tail: 0.0,
            decay: 0.0,
        }
    }

    pub(crate) fn at(&self, k: usize) -> f64 {
        if k == 0 {
            self.lead
        } else {
            self.tail * self.decay.powi(k as i32 - 1)
        }
    }

    /// `sum_{k=0}^{n} w(k)`.
    pub(crate) fn total(&self, n: usize) -> f64 {
        if n == 0 || self.tail == 0.0 {
            return self.lead;
        }
        let geometric = if self.decay == 0.0 {
            1.0
        } else {
            (1.0 - self.decay.powi(n as i32)) / (1.0 - self.decay)
        };
        self.lead + self.tail * geometric
    }

    pub(crate) fn limit_total(&self) -> f64 {
        self.lead + self.tail / (1.0 - self.decay)
    }

    /// `sum_{k>=1} k w(k)`: the weight of a constant per-step displacement.
    pub(crate) fn limit_first_moment(&self) -> f64 {
        self.tail / ((1.0 - self.decay) * (1.0 - self.decay))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Channel {
    pub feature: Feature,
    pub weights: LagWeights,
}

/// Step index for n-dependent coefficients, or their n -> infinity limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Horizon {
    Step(usize),
    Limit,
}

impl Horizon {
    pub(crate) fn total(self, w: &LagWeights) -> f64 {
        match self {
            Horizon::Step(n) => w.total(n),
            Horizon::Limit => w.limit_total(),
        }
    }
}

fn ema(beta: f64, horizon: Horizon, bias_correction: bool) -> LagWeights {
    let b = match horizon {
        Horizon::Step(n) if bias_correction => (1.0 - beta) / (1.0 - beta.powi(n as i32 + 1)),
        _ => 1.0 - beta,
    };
    LagWeights {
        lead: b,
        tail: b * beta,
        decay: beta,
    }
}

fn lion_weights(rho1: f64, rho2: f64, horizon: Horizon, bias_correction: bool) -> LagWeights {
    match horizon {
        Horizon::Step(n) if bias_correction => {
            let d = 1.0 - rho2.powi(n as i32 + 1);
            LagWeights {
                lead: 1.0 - rho1 * (1.0 - rho2.powi(n as i32)) / d,
                tail: rho1 * (1.0 - rho2) / d,
                decay: rho2,
            }
        }
        _ => LagWeights {
            lead: 1.0 - rho1,
            tail: rho1 * (1.0 - rho2),
            decay: rho2,
        },
    }
}

pub(crate) fn channels(spec: &OptimizerSpec, horizon: Horizon) -> Vec<Channel> {
    let ch = |feature, weights| Channel { feature, weights };
    let b1 = spec.beta1;
    match spec.kind {
        OptimizerKind::HeavyBall => vec![ch(
            Feature::Grad,
            LagWeights {
                lead: 1.0,
                tail: b1,
                decay: b1,
            },
        )],
        OptimizerKind::Nesterov => vec![
            ch(
                Feature::Grad,
                LagWeights {
                    lead: b1,
                    tail: b1 * b1,
                    decay: b1,
                },
            ),
            ch(Feature::Grad, LagWeights::current(1.0)),
        ],
        OptimizerKind::AdamW | OptimizerKind::NAdamW => {
            let mut v = vec![
                ch(Feature::Grad, ema(b1, horizon, spec.bias_correction)),
                ch(Feature::GradSquared, ema(spec.beta2, horizon, spec.bias_correction)),
                ch(Feature::Theta, LagWeights::current(spec.lambda)),
            ];
            if spec.kind == OptimizerKind::NAdamW {
                v.push(ch(Feature::Grad, LagWeights::current(1.0)));
            }
            v
        }
        OptimizerKind::LionK => vec![
            ch(
                Feature::NegGrad,
                lion_weights(b1, spec.beta2, horizon, spec.bias_correction),
            ),
            ch(Feature::Theta, LagWeights::current(spec.lambda)),
        ],
    }
}

pub(crate) fn k_grad(kspec: KSpec, eps: f64, x: &ParamVector) -> ParamVector {
    match kspec {
        KSpec::SmoothedOneNorm => softsign_unchecked(x, eps),
        KSpec::HalfSquaredTwoNorm => x.clone(),
        KSpec::OneNorm => x.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
    }
}

/// Diagonal of the Hessian of `K`.
pub(crate) fn k_hess_diag(kspec: KSpec, eps: f64, x: &ParamVector) -> Result<ParamVector> {
    match kspec {
        KSpec::SmoothedOneNorm => Ok(softsign_slope(x, eps)),
        KSpec::HalfSquaredTwoNorm => Ok(ParamVector::filled(x.len(), 1.0)),
        KSpec::OneNorm => Err(Error::NonSmooth("differentiating the update map")),
    }
}

/// Fails for specs whose update map is not differentiable.
pub(crate) fn require_smooth(spec: &OptimizerSpec, what: &'static str) -> Result<()> {
    if spec.kind == OptimizerKind::LionK && !spec.kspec.is_smooth() {
        Err(Error::NonSmooth(what))
    } else {
        Ok(())
    }
}

fn adam_denominator(m2: &ParamVector, eps: f64) -> ParamVector {
    m2.map(|x| (x + eps).sqrt())
}

/// The outer map `Q`.
pub(crate) fn combine(spec: &OptimizerSpec, m: &[ParamVector]) -> ParamVector {
    match spec.kind {
        OptimizerKind::HeavyBall => m[0].clone(),
        OptimizerKind::Nesterov => &m[0] + &m[1],
        OptimizerKind::AdamW => {
            let den = adam_denominator(&m[1], spec.eps);
            m[0].zip_map(&den, |a, b| a / b) + &m[2]
        }
        OptimizerKind::NAdamW => {
            let b1 = spec.beta1;
            let den = adam_denominator(&m[1], spec.eps);
            let num = m[0].zip_map(&m[3], |a, c| b1 * a + (1.0 - b1) * c);
            num.zip_map(&den, |a, b| a / b) + &m[2]
        }
        OptimizerKind::LionK => -k_grad(spec.kspec, spec.eps, &m[0]) + &m[1],
    }
}

/// `dQ/dm_l` at `m`, applied to `v`.
pub(crate) fn combine_jvp(
    spec: &OptimizerSpec,
    m: &[ParamVector],
    l: usize,
    v: &ParamVector,
) -> Result<ParamVector> {
    let out = match (spec.kind, l) {
        (OptimizerKind::HeavyBall, _) | (OptimizerKind::Nesterov, _) => v.clone(),
        (OptimizerKind::AdamW | OptimizerKind::NAdamW, 0 | 3) => {
            let scale = match (spec.kind, l) {
                (OptimizerKind::NAdamW, 0) => spec.beta1,
                (OptimizerKind::NAdamW, _) => 1.0 - spec.beta1,
                _ => 1.0,
            };
            let den = adam_denominator(&m[1], spec.eps);
            v.zip_map(&den, |x, d| scale * x / d)
        }
        (OptimizerKind::AdamW | OptimizerKind::NAdamW, 1) => {
            let num = if spec.kind == OptimizerKind::NAdamW {
                let b1 = spec.beta1;
                m[0].zip_map(&m[3], |a, c| b1 * a + (1.0 - b1) * c)
            } else {
                m[0].clone()
            };
            let mut out = ParamVector::zeros(v.len());
            for i in 0..v.len() {
                let s = m[1][i] + spec.eps;
                out[i] = -0.5 * num[i] * v[i] / (s * s.sqrt());
            }
            out
        }
        (OptimizerKind::AdamW | OptimizerKind::NAdamW, _) => v.clone(),
        (OptimizerKind::LionK, 0) => -k_hess_diag(spec.kspec, spec.eps, &m[0])?.hadamard(v),
        (OptimizerKind::LionK, _) => v.clone(),
    };
    Ok(out)
}

/// Feature values at one point, sharing a single gradient evaluation.
pub(crate) struct PointFeatures {
    pub theta: ParamVector,
    pub grad: ParamVector,
}

impl PointFeatures {
    pub(crate) fn new(loss: &dyn LossModel, theta: &ParamVector) -> Self {
        Self {
            theta: theta.clone(),
            grad: loss.grad(theta),
        }
    }

    pub(crate) fn feature(&self, f: Feature) -> ParamVector {
        f.eval(&self.theta, &self.grad)
    }

    /// Momentum variables with every lag frozen at this point.
    pub(crate) fn frozen_moments(&self, chans: &[Channel], horizon: Horizon) -> Vec<ParamVector> {
        chans
            .iter()
            .map(|c| self.feature(c.feature) * horizon.total(&c.weights))
            .collect()
    }

    /// `sum_l dQ/dm_l(m) Jf_l u_l`, using one Hessian-vector product per
    /// distinct input vector.
    pub(crate) fn apply_chain(
        &self,
        loss: &dyn LossModel,
        spec: &OptimizerSpec,
        chans: &[Channel],
        moments: &[ParamVector],
        inputs: &[Option<ParamVector>],
    ) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(self.theta.len());
        // several channels usually share the same input vector; cache the last hvp
        let mut cached: Option<(&ParamVector, ParamVector)> = None;
        for (l, (c, u)) in chans.iter().zip(inputs).enumerate() {
            let Some(u) = u else { continue };
            let hv = if c.feature.needs_hessian() {
                match &cached {
                    Some((key, hv)) if *key == u => hv.clone(),
                    _ => {
                        let hv = loss.hvp(&self.theta, u);
                        cached = Some((u, hv.clone()));
                        hv
                    }
                }
            } else {
                ParamVector::zeros(0)
            };
            let jf = c.feature.jvp(&self.grad, &hv, u);
            out += &combine_jvp(spec, moments, l, &jf)?;
        }
        Ok(out)
    }
}

/// `F^(n)(theta, ..., theta)`, or its limit.
pub(crate) fn frozen_update(
    spec: &OptimizerSpec,
    point: &PointFeatures,
    horizon: Horizon,
) -> ParamVector {
    let chans = channels(spec, horizon);
    combine(spec, &point.frozen_moments(&chans, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_weight_sums_match_direct_summation() {
        for w in [
            LagWeights { lead: 0.3, tail: 0.2, decay: 0.7 },
            LagWeights { lead: 1.0, tail: 0.5, decay: 0.0 },
            LagWeights::current(2.0),
        ] {
            for n in [0usize, 1, 2, 7, 40] {
                let direct: f64 = (0..=n).map(|k| w.at(k)).sum();
                assert!((w.total(n) - direct).abs() < 1e-14);
            }
            let far: f64 = (0..5000).map(|k| w.at(k)).sum();
            assert!((w.limit_total() - far).abs() < 1e-12);
            let moment: f64 = (1..5000).map(|k| k as f64 * w.at(k)).sum();
            assert!((w.limit_first_moment() - moment).abs() < 1e-10);
        }
    }

    #[test]
    fn bias_corrected_weights_sum_to_one() {
        for n in [0usize, 1, 5, 100] {
            let e = ema(0.9, Horizon::Step(n), true);
            assert!((e.total(n) - 1.0).abs() < 1e-13);
            let l = lion_weights(0.9, 0.99, Horizon::Step(n), true);
            assert!((l.total(n) - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn lion_weights_match_original_parametrization() {
        // m1 + m2 with coefficients (1 - rho2) rho1/rho2 rho2^(n-k) and (1 - rho1/rho2)
        let (r1, r2) = (0.9, 0.99);
        let w = lion_weights(r1, r2, Horizon::Step(10), false);
        let lead = (1.0 - r2) * r1 / r2 + 1.0 - r1 / r2;
        assert!((w.at(0) - lead).abs() < 1e-15);
        for k in 1..10 {
            let direct = (1.0 - r2) * r1 / r2 * r2.powi(k as i32);
            assert!((w.at(k) - direct).abs() < 1e-15);
        }
    }
}
