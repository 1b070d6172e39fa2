//! Recorded iterate sequences.

use std::io::{self, Write};

use crate::config::step_count;
use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::vector::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub horizon: f64,
    pub iterates: Vec<ParamVector>,
    pub loss: Vec<f64>,
    /// `|grad L|_inf` at each iterate.
    pub grad_inf: Vec<f64>,
    /// Set when an iterate left the domain; the trajectory stops before it.
    pub error: Option<Error>,
}

impl Trajectory {
    pub fn start(loss: &dyn LossModel, h: f64, horizon: f64, theta0: ParamVector) -> Self {
        let mut t = Self {
            h,
            horizon,
            iterates: Vec::with_capacity(step_count(horizon, h) + 1),
            loss: Vec::new(),
            grad_inf: Vec::new(),
            error: None,
        };
        t.push(loss, theta0);
        t
    }

    pub fn push(&mut self, loss: &dyn LossModel, theta: ParamVector) {
        self.loss.push(loss.value(&theta));
        self.grad_inf.push(loss.grad(&theta).linf_norm());
        self.iterates.push(theta);
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn last(&self) -> &ParamVector {
        self.iterates.last().expect("trajectories start with the initial point")
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }

    /// Turns a recorded domain exit into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }

    /// `|theta_a^(n) - theta_b^(n)|_inf` over the common prefix.
    pub fn gaps(&self, other: &Trajectory) -> Vec<f64> {
        self.iterates
            .iter()
            .zip(&other.iterates)
            .map(|(a, b)| (a - b).linf_norm())
            .collect()
    }

    /// CSV with columns `step,t,theta_0..theta_{d-1},loss`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.iterates.first().map_or(0, |t| t.len());
        write!(w, "step,t")?;
        for i in 0..d {
            write!(w, ",theta_{i}")?;
        }
        writeln!(w, ",loss")?;
        for (n, (theta, l)) in self.iterates.iter().zip(&self.loss).enumerate() {
            write!(w, "{n},{}", n as f64 * self.h)?;
            for x in theta.iter() {
                write!(w, ",{x}")?;
            }
            writeln!(w, ",{l}")?;
        }
        Ok(())
    }
}

/// Runs `step(n, theta^(n)) -> theta^(n+1)` for `floor(horizon / h)` steps,
/// stopping early if an iterate leaves the loss domain.
pub(crate) fn drive(
    loss: &dyn LossModel,
    h: f64,
    horizon: f64,
    theta0: ParamVector,
    mut step: impl FnMut(usize, &ParamVector) -> Result<ParamVector>,
) -> Trajectory {
    let steps = step_count(horizon, h);
    let mut traj = Trajectory::start(loss, h, horizon, theta0);
    for n in 0..steps {
        let next = match step(n, traj.last()) {
            Ok(t) => t,
            Err(e) => {
                traj.error = Some(e);
                break;
            }
        };
        if !loss.contains(&next) {
            traj.error = Some(Error::DomainExit {
                step: n + 1,
                norm: next.linf_norm(),
                radius: loss.domain_radius(),
            });
            break;
        }
        traj.push(loss, next);
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::make_scalar_quartic;

    #[test]
    fn csv_layout() {
        let l = make_scalar_quartic(1.0).unwrap();
        let t = drive(&l, 0.5, 1.0, ParamVector::from(vec![1.0]), |_, th| Ok(th * 0.5));
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "step,t,theta_0,loss\n0,0,1,0.25\n1,0.5,0.5,0.015625\n2,1,0.25,0.0009765625\n");
    }

    #[test]
    fn domain_exit_is_recorded() {
        let l = make_scalar_quartic(1.0).unwrap().with_domain_radius(10.0).unwrap();
        let t = drive(&l, 0.1, 1.0, ParamVector::from(vec![1.0]), |_, th| Ok(th * 3.0));
        assert_eq!(t.len(), 3);
        assert!(matches!(t.error, Some(Error::DomainExit { step: 3, .. })));
    }
}
