//! Optimizer hyperparameter records.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    HeavyBall,
    Nesterov,
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "nadamw")]
    NAdamW,
    LionK,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::HeavyBall,
        OptimizerKind::Nesterov,
        OptimizerKind::AdamW,
        OptimizerKind::NAdamW,
        OptimizerKind::LionK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::HeavyBall => "heavy-ball",
            OptimizerKind::Nesterov => "nesterov",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::NAdamW => "nadamw",
            OptimizerKind::LionK => "lion-k",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The convex function `K` whose gradient Lion-K applies to its momentum.
///
/// The smoothed one-norm uses the spec-wide `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KSpec {
    /// `sum_i sqrt(x_i^2 + eps)`; gradient is the soft sign.
    SmoothedOneNorm,
    /// `|x|^2 / 2`; gradient is the identity.
    HalfSquaredTwoNorm,
    /// Plain `|x|_1` with the exact sign map. Not differentiable, so only
    /// usable for qualitative memoryful runs.
    OneNorm,
}

impl KSpec {
    pub fn is_smooth(self) -> bool {
        !matches!(self, KSpec::OneNorm)
    }
}

/// Algorithm choice plus every hyperparameter.
///
/// For Lion-K, `beta1`/`beta2` hold rho1/rho2. Fields a kind does not use
/// are carried along but never read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub h: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_kspec")]
    pub kspec: KSpec,
    #[serde(default = "default_bias_correction")]
    pub bias_correction: bool,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_kspec() -> KSpec {
    KSpec::SmoothedOneNorm
}

fn default_bias_correction() -> bool {
    true
}

impl OptimizerSpec {
    fn base(kind: OptimizerKind, h: f64) -> Self {
        Self {
            kind,
            h,
            beta1: 0.0,
            beta2: 0.0,
            lambda: 0.0,
            eps: default_eps(),
            kspec: default_kspec(),
            bias_correction: true,
        }
    }

    pub fn heavy_ball(h: f64, beta: f64) -> Self {
        Self {
            beta1: beta,
            ..Self::base(OptimizerKind::HeavyBall, h)
        }
    }

    pub fn nesterov(h: f64, beta: f64) -> Self {
        Self {
            beta1: beta,
            ..Self::base(OptimizerKind::Nesterov, h)
        }
    }

    pub fn adamw(h: f64, beta1: f64, beta2: f64, lambda: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            lambda,
            eps,
            ..Self::base(OptimizerKind::AdamW, h)
        }
    }

    pub fn nadamw(h: f64, beta1: f64, beta2: f64, lambda: f64, eps: f64) -> Self {
        Self {
            kind: OptimizerKind::NAdamW,
            ..Self::adamw(h, beta1, beta2, lambda, eps)
        }
    }

    /// Lion-K without bias correction, as in its original form.
    pub fn lion_k(h: f64, rho1: f64, rho2: f64, lambda: f64, eps: f64, kspec: KSpec) -> Self {
        Self {
            beta1: rho1,
            beta2: rho2,
            lambda,
            eps,
            kspec,
            bias_correction: false,
            ..Self::base(OptimizerKind::LionK, h)
        }
    }

    /// Signum is Lion-K with `rho1 == rho2` and the smoothed one-norm.
    pub fn signum(h: f64, beta: f64, lambda: f64, eps: f64) -> Self {
        Self::lion_k(h, beta, beta, lambda, eps, KSpec::SmoothedOneNorm)
    }

    pub fn with_bias_correction(mut self, on: bool) -> Self {
        self.bias_correction = on;
        self
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h >= 0.0) || !self.h.is_finite() {
            return Err(invalid("h", format!("must be finite and >= 0, got {}", self.h)));
        }
        let unit = |name: &'static str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(name, format!("must lie in [0, 1), got {v}")))
            }
        };
        unit("beta1", self.beta1)?;
        if self.uses_beta2() {
            unit("beta2", self.beta2)?;
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid(
                "lambda",
                format!("must be finite and >= 0, got {}", self.lambda),
            ));
        }
        if self.uses_eps() && (!(self.eps > 0.0) || !self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be finite and > 0, got {}", self.eps)));
        }
        Ok(())
    }

    fn uses_beta2(&self) -> bool {
        matches!(
            self.kind,
            OptimizerKind::AdamW | OptimizerKind::NAdamW | OptimizerKind::LionK
        )
    }

    fn uses_eps(&self) -> bool {
        match self.kind {
            OptimizerKind::AdamW | OptimizerKind::NAdamW => true,
            OptimizerKind::LionK => self.kspec == KSpec::SmoothedOneNorm,
            _ => false,
        }
    }

    /// Largest per-step decay rate of any momentum variable.
    pub fn max_decay(&self) -> f64 {
        match self.kind {
            OptimizerKind::HeavyBall | OptimizerKind::Nesterov => self.beta1,
            OptimizerKind::AdamW | OptimizerKind::NAdamW => self.beta1.max(self.beta2),
            OptimizerKind::LionK => self.beta2,
        }
    }

    /// Steps until every memory weight has decayed below `tol`:
    /// `ceil(ln(tol) / ln(max beta))`, zero for memoryless specs.
    pub fn burn_in(&self, tol: f64) -> usize {
        let b = self.max_decay();
        if b <= 0.0 {
            0
        } else {
            (tol.ln() / b.ln()).ceil() as usize
        }
    }
}
