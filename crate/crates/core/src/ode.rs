//! Modified equation `theta' = G1(theta) + h G2(theta)` whose flow follows
//! the memoryless iteration to second order, with
//! `G1 = -F(theta)` and `G2 = -[c(theta) / h + J_G1 G1 / 2]`, both built from
//! the `n -> infinity` coefficients.

use serde::{Deserialize, Serialize};

use crate::config::{step_count, RunConfig};
use crate::correction::{correction_preferred, Regime};
use crate::error::{Error, Result};
use crate::harness::{run_sweep, SweepReport};
use crate::loss::LossModel;
use crate::memoryful::run_memoryful_with;
use crate::momentum::{channels, frozen_update, require_smooth, Horizon, PointFeatures};
use crate::spec::OptimizerSpec;
use crate::trajectory::Trajectory;
use crate::vector::ParamVector;

/// Memory weights below this count as decayed: the comparison restarts the
/// flow at the first step past it.
pub const ODE_BURN_IN_TOL: f64 = 1e-12;

/// Which terms of the vector field to keep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeTerms {
    /// `theta' = G1`.
    LeadingOnly,
    /// `theta' = G1 + h G2`.
    #[default]
    WithCorrection,
}

impl OdeTerms {
    pub fn name(self) -> &'static str {
        match self {
            OdeTerms::LeadingOnly => "leading-only",
            OdeTerms::WithCorrection => "with-correction",
        }
    }
}

pub struct ModifiedOde<'a> {
    spec: OptimizerSpec,
    loss: &'a dyn LossModel,
    pub h: f64,
}

impl std::fmt::Debug for ModifiedOde<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModifiedOde").field("spec", &self.spec).field("h", &self.h).finish()
    }
}

pub fn build_modified_ode<'a>(spec: &OptimizerSpec, loss: &'a dyn LossModel) -> Result<ModifiedOde<'a>> {
    spec.validate()?;
    require_smooth(spec, "the modified equation")?;
    Ok(ModifiedOde {
        spec: *spec,
        loss,
        h: spec.h,
    })
}

impl ModifiedOde<'_> {
    pub fn g1(&self, theta: &ParamVector) -> ParamVector {
        -frozen_update(&self.spec, &PointFeatures::new(self.loss, theta), Horizon::Limit)
    }

    /// `J_F(theta) v` for the limit update, through the momentum variables.
    fn update_jvp(&self, point: &PointFeatures, v: &ParamVector) -> Result<ParamVector> {
        let chans = channels(&self.spec, Horizon::Limit);
        let moments = point.frozen_moments(&chans, Horizon::Limit);
        let inputs: Vec<Option<ParamVector>> = chans
            .iter()
            .map(|c| {
                let t = Horizon::Limit.total(&c.weights);
                (t != 0.0).then(|| v * t)
            })
            .collect();
        point.apply_chain(self.loss, &self.spec, &chans, &moments, &inputs)
    }

    /// `-[c(theta) / h + J_G1(theta) G1(theta) / 2]`.
    pub fn g2(&self, theta: &ParamVector) -> Result<ParamVector> {
        let point = PointFeatures::new(self.loss, theta);
        let f = frozen_update(&self.spec, &point, Horizon::Limit);
        // J_G1 G1 = J_F F
        let discretization = self.update_jvp(&point, &f)? * 0.5;
        let memory = correction_preferred(&self.spec.with_h(1.0), self.loss, theta, Regime::Asymptotic)?.vector;
        Ok(-(memory + &discretization))
    }

    pub fn field(&self, theta: &ParamVector, terms: OdeTerms) -> Result<ParamVector> {
        let mut v = self.g1(theta);
        if terms == OdeTerms::WithCorrection {
            v.axpy(self.h, &self.g2(theta)?);
        }
        Ok(v)
    }
}

fn rk4_step(
    f: &impl Fn(&ParamVector) -> Result<ParamVector>,
    y: &ParamVector,
    dt: f64,
) -> Result<ParamVector> {
    let k1 = f(y)?;
    let k2 = f(&(y + &(&k1 * (0.5 * dt))))?;
    let k3 = f(&(y + &(&k2 * (0.5 * dt))))?;
    let k4 = f(&(y + &(&k3 * dt)))?;
    let mut out = y.clone();
    out.axpy(dt / 6.0, &k1);
    out.axpy(dt / 3.0, &k2);
    out.axpy(dt / 3.0, &k3);
    out.axpy(dt / 6.0, &k4);
    Ok(out)
}

/// Classical Runge-Kutta on `[0, T]` with sub-steps of at most `dt`,
/// sampled at `t = n h` for `n <= floor(T / h)`. Requires `dt <= h / 4`.
pub fn integrate_rk4(ode: &ModifiedOde<'_>, terms: OdeTerms, theta0: ParamVector, horizon: f64, dt: f64) -> Result<Trajectory> {
    let h = ode.h;
    if !(h > 0.0) {
        return Err(crate::error::invalid("h", "sampling the flow needs h > 0"));
    }
    let limit = h / 4.0;
    if !(dt > 0.0) || dt > limit {
        return Err(Error::StepTooLarge { dt, limit });
    }
    let sub = (h / dt).ceil() as usize;
    let tau = h / sub as f64;
    let field = |y: &ParamVector| ode.field(y, terms);
    let loss = ode.loss;
    let mut traj = Trajectory::start(loss, h, horizon, theta0);
    for n in 0..step_count(horizon, h) {
        let mut y = traj.last().clone();
        for _ in 0..sub {
            y = rk4_step(&field, &y, tau)?;
        }
        if !loss.contains(&y) || !y.is_finite() {
            traj.error = Some(Error::DomainExit {
                step: n + 1,
                norm: y.linf_norm(),
                radius: loss.domain_radius(),
            });
            break;
        }
        traj.push(loss, y);
    }
    Ok(traj)
}

/// Distance between the memoryful iterates and the modified flow over a
/// window of `floor(T / h)` steps. The flow starts from `theta^(n0)` with
/// `n0 = max(n_burn, ceil(start_time / h))`, so that transient
/// bias-correction terms have decayed. Sweeps pass a common `start_time`
/// so every step size is compared on the same stretch of the trajectory.
pub fn discrete_vs_ode_error(
    loss: &dyn LossModel,
    spec: &OptimizerSpec,
    theta0: ParamVector,
    start_time: f64,
    horizon: f64,
    terms: OdeTerms,
) -> Result<f64> {
    let ode = build_modified_ode(spec, loss)?;
    let start = spec.burn_in(ODE_BURN_IN_TOL).max((start_time / spec.h * (1.0 - 1e-12)).ceil() as usize);
    let steps = step_count(horizon, spec.h);
    let total = (start + steps) as f64 * spec.h;
    let full = run_memoryful_with(loss, spec, theta0, total).into_result()?;
    let flow = integrate_rk4(&ode, terms, full.iterates[start].clone(), steps as f64 * spec.h, spec.h / 8.0)?
        .into_result()?;
    Ok(full.iterates[start..]
        .iter()
        .zip(&flow.iterates)
        .map(|(a, b)| (a - b).linf_norm())
        .fold(0.0, f64::max))
}

/// [`discrete_vs_ode_error`] over a grid of step sizes, with a slope fit.
/// The common start time is the burn-in of the coarsest step.
pub fn compare_discrete_vs_ode(config: &RunConfig, h_grid: &[f64], terms: OdeTerms) -> Result<SweepReport> {
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    let burn = config.optimizer.burn_in(ODE_BURN_IN_TOL);
    let start_time = burn as f64 * h_grid.iter().copied().fold(0.0, f64::max);
    let mut report = run_sweep(config, h_grid, "ode-compare", terms.name(), |c| {
        discrete_vs_ode_error(loss.as_ref(), &c.optimizer, theta0.clone(), start_time, c.horizon, terms)
    })?;
    report.notes.insert("burn_in_steps".into(), burn.to_string());
    report.notes.insert("start_time".into(), format!("{start_time}"));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialTheta, LossSpec};
    use crate::harness::SlopeGate;
    use crate::loss::{make_quadratic, random_quadratic};
    use crate::rng::{stream_rng, Stream};
    use crate::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn heavy_ball_terms_in_closed_form() {
        let q = random_quadratic(4, 0.3, 3.0, 1.0, &mut stream_rng(1, Stream::Loss)).unwrap();
        let mut rng = stream_rng(1, Stream::Probe);
        for beta in [0.0, 0.5, 0.9] {
            let spec = OptimizerSpec::heavy_ball(0.01, beta);
            let ode = build_modified_ode(&spec, &q).unwrap();
            for _ in 0..10 {
                let t = pv(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
                let g = q.grad(&t);
                let g1 = ode.g1(&t);
                assert!((&g1 + &(&g * (1.0 / (1.0 - beta)))).linf_norm() <= 1e-12);
                // grad |grad L|^2 = 2 H grad L
                let expect = q.hvp(&t, &g) * (-(1.0 + beta) / (4.0 * (1.0 - beta).powi(3)) * 2.0);
                assert!((&ode.g2(&t).unwrap() - &expect).linf_norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn scalar_spot_value() {
        let q = make_quadratic(DMatrix::identity(1, 1), ParamVector::zeros(1)).unwrap();
        let ode = build_modified_ode(&OptimizerSpec::heavy_ball(0.1, 0.5), &q).unwrap();
        assert!((ode.g2(&pv(&[1.0])).unwrap()[0] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn linear_flow_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = pv(&[0.3, -0.7]);
        let q = make_quadratic(a.clone(), b.clone()).unwrap();
        let spec = OptimizerSpec::heavy_ball(0.01, 0.0);
        let ode = build_modified_ode(&spec, &q).unwrap();
        let theta0 = pv(&[1.0, 1.0]);
        let t = integrate_rk4(&ode, OdeTerms::LeadingOnly, theta0.clone(), 1.0, spec.h / 8.0).unwrap();
        let star = q.minimizer().unwrap();
        let eig = a.symmetric_eigen();
        let x0 = nalgebra::DVector::from_column_slice((&theta0 - &star).as_slice());
        for (n, got) in t.iterates.iter().enumerate() {
            let time = n as f64 * spec.h;
            let decay = nalgebra::DVector::from_iterator(2, eig.eigenvalues.iter().map(|l| (-l * time).exp()));
            let y = &eig.eigenvectors * decay.component_mul(&(eig.eigenvectors.transpose() * &x0));
            let exact = &star + &pv(y.as_slice());
            assert!((got - &exact).linf_norm() <= 1e-10, "t = {time}");
        }
    }

    #[test]
    fn halving_dt_barely_moves_the_endpoint() {
        let q = random_quadratic(3, 0.3, 3.0, 1.0, &mut stream_rng(2, Stream::Loss)).unwrap();
        let spec = OptimizerSpec::adamw(0.02, 0.9, 0.95, 0.1, 1e-3);
        let ode = build_modified_ode(&spec, &q).unwrap();
        let theta0 = pv(&[1.0, -0.5, 0.2]);
        let a = integrate_rk4(&ode, OdeTerms::WithCorrection, theta0.clone(), 1.0, spec.h / 8.0).unwrap();
        let b = integrate_rk4(&ode, OdeTerms::WithCorrection, theta0, 1.0, spec.h / 16.0).unwrap();
        assert!((a.last() - b.last()).linf_norm() <= 1e-10);
    }

    #[test]
    fn zero_horizon_and_step_limits() {
        let q = random_quadratic(2, 0.3, 3.0, 1.0, &mut stream_rng(2, Stream::Loss)).unwrap();
        let ode = build_modified_ode(&OptimizerSpec::heavy_ball(0.1, 0.5), &q).unwrap();
        let theta0 = pv(&[0.4, 0.1]);
        let t = integrate_rk4(&ode, OdeTerms::WithCorrection, theta0.clone(), 0.0, 0.0125).unwrap();
        assert_eq!(t.iterates, vec![theta0.clone()]);
        assert!(matches!(
            integrate_rk4(&ode, OdeTerms::WithCorrection, theta0, 1.0, 0.05),
            Err(Error::StepTooLarge { .. })
        ));
    }

    fn config(optimizer: OptimizerSpec) -> RunConfig {
        RunConfig {
            seed: 4,
            dim: 3,
            horizon: 1.0,
            loss: LossSpec::Quadratic {
                eig_min: 0.3,
                eig_max: 2.0,
                offset_scale: 1.0,
            },
            optimizer,
            initial_theta: InitialTheta::Gaussian { scale: 1.0 },
            domain_radius: 1e3,
        }
    }

    #[test]
    fn gradient_descent_backward_error_rates() {
        let c = config(OptimizerSpec::heavy_ball(0.01, 0.0));
        let hs: Vec<f64> = (0..5).map(|j| 0.04 * 0.5f64.powi(j)).collect();
        let lead = compare_discrete_vs_ode(&c, &hs, OdeTerms::LeadingOnly).unwrap();
        let full = compare_discrete_vs_ode(&c, &hs, OdeTerms::WithCorrection).unwrap();
        assert!(SlopeGate::new("lead", 0.8, 1.2, 0.98).check(&lead).passed, "{:?}", lead.fit);
        assert!(SlopeGate::new("full", 1.7, 2.3, 0.98).check(&full).passed, "{:?}", full.fit);
    }

    #[test]
    fn heavy_ball_flow_rates() {
        let c = config(OptimizerSpec::heavy_ball(0.01, 0.5));
        // coarser steps are still pre-asymptotic: the local error constant is ~40
        let hs: Vec<f64> = (0..5).map(|j| 0.004 * 0.5f64.powi(j)).collect();
        let lead = compare_discrete_vs_ode(&c, &hs, OdeTerms::LeadingOnly).unwrap();
        let full = compare_discrete_vs_ode(&c, &hs, OdeTerms::WithCorrection).unwrap();
        assert!(SlopeGate::new("lead", 0.8, 1.3, 0.98).check(&lead).passed, "{:?}", lead.fit);
        assert!(SlopeGate::new("full", 1.7, 2.3, 0.98).check(&full).passed, "{:?}", full.fit);
        assert_eq!(full.notes["burn_in_steps"], "40");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn jacobian_term_matches_finite_differences(seed in 0u64..1000) {
            let mut rng = stream_rng(seed, Stream::Probe);
            let q = random_quadratic(3, 0.3, 3.0, 1.0, &mut rng).unwrap();
            let spec = OptimizerSpec::nadamw(0.01, 0.9, 0.95, 0.2, 1e-2);
            let ode = build_modified_ode(&spec, &q).unwrap();
            let t = pv(&(0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let g1 = ode.g1(&t);
            let e = 1e-6;
            let fd = (ode.g1(&(&t + &(&g1 * e))) - &ode.g1(&(&t - &(&g1 * e)))) * (1.0 / (2.0 * e));
            let memory = correction_preferred(&spec.with_h(1.0), &q, &t, Regime::Asymptotic).unwrap().vector;
            let expect = -(memory + &(fd * 0.5));
            let got = ode.g2(&t).unwrap();
            prop_assert!((&got - &expect).linf_norm() <= 1e-6 * (1.0 + expect.linf_norm()));
        }
    }
}
