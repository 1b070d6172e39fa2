//! Run configuration: everything needed to reproduce one trajectory.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::loss::{
    make_minibatch_quadratics, make_quartic, random_logistic, random_quadratic, LossModel,
    MiniBatchFamily, DEFAULT_DOMAIN_RADIUS,
};
use crate::rng::{stream_rng, Stream};
use crate::spec::OptimizerSpec;
use crate::vector::ParamVector;

/// Which fixture to build, with its parameters. Random fixtures draw from
/// the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossSpec {
    /// Random SPD quadratic with log-spaced spectrum and Gaussian offset.
    Quadratic {
        eig_min: f64,
        eig_max: f64,
        #[serde(default = "one")]
        offset_scale: f64,
    },
    /// Logistic regression on synthetic Gaussian data.
    Logistic {
        samples: usize,
        #[serde(default)]
        ridge: f64,
    },
    /// Separable quartic `a/4 sum theta_i^4`.
    Quartic { a: f64 },
    /// Quadratic mini-batch family; trajectories use its mean loss.
    MinibatchQuadratic { count: usize, spread: f64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialTheta {
    Explicit { values: Vec<f64> },
    Gaussian { scale: f64 },
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    /// Time horizon; a run takes `floor(horizon / h)` steps.
    pub horizon: f64,
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub initial_theta: InitialTheta,
    #[serde(default = "default_radius")]
    pub domain_radius: f64,
}

fn default_radius() -> f64 {
    DEFAULT_DOMAIN_RADIUS
}

/// `floor(horizon / h)`, tolerant of the rounding in `horizon / h` when the
/// ratio is meant to be an integer.
pub fn step_count(horizon: f64, h: f64) -> usize {
    if h <= 0.0 || horizon <= 0.0 {
        return 0;
    }
    (horizon / h * (1.0 + 1e-12)).floor() as usize
}

impl RunConfig {
    pub fn with_h(&self, h: f64) -> Self {
        let mut c = self.clone();
        c.optimizer.h = h;
        c
    }

    pub fn steps(&self) -> usize {
        step_count(self.horizon, self.optimizer.h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be >= 1"));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(invalid("horizon", format!("must be finite and >= 0, got {}", self.horizon)));
        }
        if !(self.domain_radius > 0.0) || !self.domain_radius.is_finite() {
            return Err(invalid(
                "domain_radius",
                format!("must be finite and > 0, got {}", self.domain_radius),
            ));
        }
        self.optimizer.validate()?;
        if !(self.optimizer.h > 0.0) {
            return Err(invalid("h", format!("must be > 0 for a run, got {}", self.optimizer.h)));
        }
        match &self.loss {
            LossSpec::Quadratic { eig_min, eig_max, offset_scale } => {
                if !(*eig_min > 0.0 && eig_max >= eig_min && eig_max.is_finite()) {
                    return Err(invalid("eig_min", "need 0 < eig_min <= eig_max < inf"));
                }
                if !offset_scale.is_finite() {
                    return Err(invalid("offset_scale", "must be finite"));
                }
            }
            LossSpec::Logistic { samples, ridge } => {
                if *samples == 0 {
                    return Err(invalid("samples", "must be >= 1"));
                }
                if !(*ridge >= 0.0) {
                    return Err(invalid("ridge", "must be >= 0"));
                }
            }
            LossSpec::Quartic { a } => {
                if !(*a > 0.0) {
                    return Err(invalid("a", "must be > 0"));
                }
            }
            LossSpec::MinibatchQuadratic { count, spread } => {
                if *count < 2 {
                    return Err(invalid("count", "must be >= 2"));
                }
                if !(*spread >= 0.0) {
                    return Err(invalid("spread", "must be >= 0"));
                }
            }
        }
        match &self.initial_theta {
            InitialTheta::Explicit { values } if values.len() != self.dim => {
                return Err(Error::LengthMismatch {
                    left: self.dim,
                    right: values.len(),
                })
            }
            InitialTheta::Gaussian { scale } if !(*scale >= 0.0) => {
                return Err(invalid("scale", "must be >= 0"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn build_loss(&self) -> Result<Arc<dyn LossModel>> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, Stream::Loss);
        let r = self.domain_radius;
        let loss: Arc<dyn LossModel> = match &self.loss {
            LossSpec::Quadratic { eig_min, eig_max, offset_scale } => Arc::new(
                random_quadratic(self.dim, *eig_min, *eig_max, *offset_scale, &mut rng)?
                    .with_domain_radius(r)?,
            ),
            LossSpec::Logistic { samples, ridge } => Arc::new(
                random_logistic(*samples, self.dim, *ridge, &mut rng)?.with_domain_radius(r)?,
            ),
            LossSpec::Quartic { a } => Arc::new(make_quartic(*a, self.dim)?.with_domain_radius(r)?),
            LossSpec::MinibatchQuadratic { .. } => Arc::new(
                self.minibatch_family()?
                    .mean_loss()
                    .clone()
                    .with_domain_radius(r)?,
            ),
        };
        Ok(loss)
    }

    pub fn minibatch_family(&self) -> Result<MiniBatchFamily> {
        match &self.loss {
            LossSpec::MinibatchQuadratic { count, spread } => {
                make_minibatch_quadratics(*count, self.dim, *spread, self.seed)
            }
            _ => Err(invalid("loss", "expected id = \"minibatch-quadratic\"")),
        }
    }

    pub fn initial_point(&self) -> Result<ParamVector> {
        self.validate()?;
        let theta = match &self.initial_theta {
            InitialTheta::Explicit { values } => ParamVector::new(values.clone())?,
            InitialTheta::Constant { value } => ParamVector::new(vec![*value; self.dim])?,
            InitialTheta::Gaussian { scale } => {
                let mut rng = stream_rng(self.seed, Stream::Init);
                let v = (0..self.dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                ParamVector::new(v)?
            }
        };
        if theta.linf_norm() >= self.domain_radius {
            return Err(invalid("initial_theta", "lies outside the domain"));
        }
        Ok(theta)
    }
}
