//! Step-size sweeps, log-log slope fits and trajectory comparisons.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::memoryful::run_memoryful_with;
use crate::memoryless::{correction_method_for, defects_along, run_memoryless_with, MemorylessKind};

/// Metrics at or below this are rounding noise and stay out of fits.
pub const METRIC_FLOOR: f64 = 1e3 * f64::EPSILON;

/// Memory weights below this count as decayed when deciding which steps
/// enter ordering comparisons.
pub const CLOSENESS_BURN_IN_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointStatus {
    Ok,
    BelowFloor,
    DomainExit,
}

impl PointStatus {
    pub fn name(self) -> &'static str {
        match self {
            PointStatus::Ok => "ok",
            PointStatus::BelowFloor => "below-floor",
            PointStatus::DomainExit => "domain-exit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub h: f64,
    /// `None` when the run left the domain.
    pub metric: Option<f64>,
    pub status: PointStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Number of points that entered the fit.
    pub used: usize,
}

/// Ordinary least squares of `ln metric` against `ln h`, skipping points
/// with a metric at or below [`METRIC_FLOOR`] or a non-positive `h`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LogLogFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(h, m)| *h > 0.0 && h.is_finite() && *m > METRIC_FLOOR && m.is_finite())
        .map(|(h, m)| (h.ln(), m.ln()))
        .collect();
    if logs.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: logs.len(),
        });
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("h", "all step sizes coincide"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LogLogFit {
        slope,
        intercept,
        r2,
        used: logs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub experiment: String,
    pub kind: String,
    /// Sorted by `h`, largest first.
    pub points: Vec<SweepPoint>,
    /// `None` when fewer than three points survive the floor.
    pub fit: Option<LogLogFit>,
    pub config: RunConfig,
    pub notes: BTreeMap<String, String>,
}

impl SweepReport {
    fn assemble(experiment: &str, kind: &str, config: &RunConfig, mut points: Vec<SweepPoint>) -> Self {
        points.sort_by(|a, b| b.h.total_cmp(&a.h));
        let usable: Vec<(f64, f64)> = points
            .iter()
            .filter_map(|p| p.metric.filter(|_| p.status == PointStatus::Ok).map(|m| (p.h, m)))
            .collect();
        Self {
            experiment: experiment.to_string(),
            kind: kind.to_string(),
            points,
            fit: fit_loglog(&usable).ok(),
            config: config.clone(),
            notes: BTreeMap::new(),
        }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    pub fn intercept(&self) -> Option<f64> {
        self.fit.map(|f| f.intercept)
    }

    pub fn r2(&self) -> Option<f64> {
        self.fit.map(|f| f.r2)
    }

    /// `"ok"`, or `"degenerate"` when no slope could be fitted.
    pub fn status(&self) -> &'static str {
        if self.fit.is_some() {
            "ok"
        } else {
            "degenerate"
        }
    }

    /// CSV with columns `h,metric,status`; the metric is blank after a domain exit.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "h,metric,status")?;
        for p in &self.points {
            let m = p.metric.map_or_else(String::new, |m| m.to_string());
            writeln!(w, "{},{},{}", p.h, m, p.status.name())?;
        }
        Ok(())
    }
}

/// Accepted range for a fitted slope.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeGate {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub min_r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SlopeGate {
    pub fn new(name: impl Into<String>, min: f64, max: f64, min_r2: f64) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            min_r2,
        }
    }

    pub fn check(&self, report: &SweepReport) -> GateOutcome {
        let (passed, detail) = match report.fit {
            None => (false, "no slope: fewer than 3 points above the floor".to_string()),
            Some(f) => {
                let ok = (self.min..=self.max).contains(&f.slope) && f.r2 >= self.min_r2;
                (
                    ok,
                    format!(
                        "slope {:.4} in [{}, {}], r2 {:.4} >= {}",
                        f.slope, self.min, self.max, f.r2, self.min_r2
                    ),
                )
            }
        };
        GateOutcome {
            name: self.name.clone(),
            passed,
            detail,
        }
    }
}

fn check_grid(h_grid: &[f64]) -> Result<()> {
    if h_grid.len() < 3 {
        return Err(invalid("h_grid", format!("need at least 3 step sizes, got {}", h_grid.len())));
    }
    if let Some(h) = h_grid.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(invalid("h_grid", format!("step sizes must be finite and > 0, got {h}")));
    }
    Ok(())
}

/// Evaluates `metric` at every step size in parallel. Domain exits mark the
/// point; any other error aborts the sweep.
pub(crate) fn run_sweep(
    config: &RunConfig,
    h_grid: &[f64],
    experiment: &str,
    kind: &str,
    metric: impl Fn(&RunConfig) -> Result<f64> + Sync,
) -> Result<SweepReport> {
    config.validate()?;
    check_grid(h_grid)?;
    let points = h_grid
        .par_iter()
        .map(|&h| {
            let (metric, status) = match metric(&config.with_h(h)) {
                Ok(m) if m > METRIC_FLOOR => (Some(m), PointStatus::Ok),
                Ok(m) => (Some(m), PointStatus::BelowFloor),
                Err(Error::DomainExit { .. }) => (None, PointStatus::DomainExit),
                Err(e) => return Err(e),
            };
            Ok(SweepPoint { h, metric, status })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport::assemble(experiment, kind, config, points))
}

fn note_method(report: &mut SweepReport, config: &RunConfig, kind: MemorylessKind) {
    if let Some(m) = correction_method_for(&config.optimizer, kind) {
        report.notes.insert("correction_method".into(), m.name().into());
    }
}

/// `max_n |theta^(n) - theta~^(n)|_inf` over `n <= floor(T / h)` for each `h`.
pub fn global_error_sweep(config: &RunConfig, h_grid: &[f64], kind: MemorylessKind) -> Result<SweepReport> {
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    let mut report = run_sweep(config, h_grid, "global-error", kind.name(), |c| {
        let full = run_memoryful_with(loss.as_ref(), &c.optimizer, theta0.clone(), c.horizon).into_result()?;
        let approx =
            run_memoryless_with(loss.as_ref(), &c.optimizer, theta0.clone(), c.horizon, kind).into_result()?;
        Ok(full.gaps(&approx).into_iter().fold(0.0, f64::max))
    })?;
    note_method(&mut report, config, kind);
    Ok(report)
}

/// Per-step one-step defects for each `h`, next to the sweep of their maxima.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DefectSweep {
    pub report: SweepReport,
    /// Defect sequences in the order of `report.points`; empty after a domain exit.
    pub defects: Vec<Vec<f64>>,
}

impl DefectSweep {
    /// CSV with columns `h,n,defect`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "h,n,defect")?;
        for (p, d) in self.report.points.iter().zip(&self.defects) {
            for (n, x) in d.iter().enumerate() {
                writeln!(w, "{},{n},{x}", p.h)?;
            }
        }
        Ok(())
    }
}

/// Sup over `n <= floor(T / h)` of the one-step defect of the memoryless
/// trajectory of the given kind.
pub fn defect_sweep(config: &RunConfig, h_grid: &[f64], kind: MemorylessKind) -> Result<DefectSweep> {
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    let defects_for = |c: &RunConfig| -> Result<Vec<f64>> {
        let traj =
            run_memoryless_with(loss.as_ref(), &c.optimizer, theta0.clone(), c.horizon, kind).into_result()?;
        Ok(defects_along(loss.as_ref(), &c.optimizer, &traj.iterates, usize::MAX))
    };
    let mut report = run_sweep(config, h_grid, "defect", kind.name(), |c| {
        Ok(defects_for(c)?.into_iter().fold(0.0, f64::max))
    })?;
    note_method(&mut report, config, kind);
    let defects = report
        .points
        .par_iter()
        .map(|p| match p.status {
            PointStatus::DomainExit => Ok(Vec::new()),
            _ => defects_for(&config.with_h(p.h)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DefectSweep { report, defects })
}

/// Per-step distances from the memoryful trajectory to both memoryless ones.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosenessSeries {
    pub h: f64,
    /// Steps before this index are excluded from ordering comparisons.
    pub burn_in: usize,
    pub second_order: Vec<f64>,
    pub first_order: Vec<f64>,
}

impl ClosenessSeries {
    /// Indices `n >= max(burn_in, 1)` within the recorded range.
    pub fn post_burn_in(&self) -> std::ops::Range<usize> {
        let len = self.second_order.len().min(self.first_order.len());
        self.burn_in.max(1).min(len)..len
    }

    /// Fraction of post-burn-in steps where the second-order gap does not
    /// exceed the first-order gap; `None` if no step is past burn-in.
    pub fn ordered_fraction(&self) -> Option<f64> {
        self.ordered_fraction_over(self.post_burn_in())
    }

    pub fn ordered_fraction_over(&self, range: std::ops::Range<usize>) -> Option<f64> {
        if range.is_empty() {
            return None;
        }
        let len = range.len();
        let hits = range.filter(|&n| self.second_order[n] <= self.first_order[n]).count();
        Some(hits as f64 / len as f64)
    }
}

/// Runs the memoryful iteration and both memoryless kinds at each `h`.
pub fn trajectory_closeness(config: &RunConfig, h_list: &[f64]) -> Result<Vec<ClosenessSeries>> {
    config.validate()?;
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    h_list
        .par_iter()
        .map(|&h| {
            let spec = config.optimizer.with_h(h);
            spec.validate()?;
            let run = |kind: Option<MemorylessKind>| match kind {
                None => run_memoryful_with(loss.as_ref(), &spec, theta0.clone(), config.horizon).into_result(),
                Some(k) => run_memoryless_with(loss.as_ref(), &spec, theta0.clone(), config.horizon, k).into_result(),
            };
            let full = run(None)?;
            let second = run(Some(MemorylessKind::SECOND_ORDER))?;
            let first = run(Some(MemorylessKind::FirstOrder))?;
            Ok(ClosenessSeries {
                h,
                burn_in: spec.burn_in(CLOSENESS_BURN_IN_TOL),
                second_order: full.gaps(&second),
                first_order: full.gaps(&first),
            })
        })
        .collect()
}

/// CSV with columns `h,n,t,second_order_gap,first_order_gap`.
pub fn write_closeness_csv<W: Write>(series: &[ClosenessSeries], mut w: W) -> io::Result<()> {
    writeln!(w, "h,n,t,second_order_gap,first_order_gap")?;
    for s in series {
        for (n, (a, b)) in s.second_order.iter().zip(&s.first_order).enumerate() {
            writeln!(w, "{},{n},{},{a},{b}", s.h, n as f64 * s.h)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialTheta, LossSpec};
    use crate::rng::{stream_rng, Stream};
    use crate::spec::OptimizerSpec;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn hb_config(beta: f64) -> RunConfig {
        RunConfig {
            seed: 11,
            dim: 4,
            horizon: 1.0,
            loss: LossSpec::Quadratic {
                eig_min: 0.2,
                eig_max: 2.0,
                offset_scale: 1.0,
            },
            optimizer: OptimizerSpec::heavy_ball(0.01, beta),
            initial_theta: InitialTheta::Gaussian { scale: 1.0 },
            domain_radius: 1e3,
        }
    }

    fn grid() -> Vec<f64> {
        (0..5).map(|j| 0.02 * 0.5f64.powi(j)).collect()
    }

    #[test]
    fn exact_power_laws_are_recovered() {
        for p in [2.0, 3.0] {
            let pts: Vec<(f64, f64)> = grid().into_iter().map(|h| (h, 7.0 * h.powf(p))).collect();
            let f = fit_loglog(&pts).unwrap();
            assert!((f.slope - p).abs() < 1e-12);
            assert!((f.intercept - 7f64.ln()).abs() < 1e-10);
            assert!((f.r2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_power_law_slope_is_close() {
        let mut rng = stream_rng(5, Stream::Probe);
        let hs: Vec<f64> = (0..12).map(|j| 1e-1 * 0.5f64.powi(j)).collect();
        let pts: Vec<(f64, f64)> = hs
            .iter()
            .map(|&h| (h, h * h * (1.0 + 0.05 * rng.random_range(-1.0..1.0))))
            .collect();
        assert!((fit_loglog(&pts).unwrap().slope - 2.0).abs() < 0.1);
    }

    #[test]
    fn floor_and_count_guards() {
        let pts = [(0.1, 1.0), (0.05, 1e-20), (0.025, 0.5)];
        assert_eq!(fit_loglog(&pts), Err(Error::TooFewPoints { needed: 3, got: 2 }));
        assert!(matches!(fit_loglog(&[(0.1, 1.0); 4]), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn memoryless_heavy_ball_rates() {
        let c = hb_config(0.5);
        let second = global_error_sweep(&c, &grid(), MemorylessKind::SECOND_ORDER).unwrap();
        let first = global_error_sweep(&c, &grid(), MemorylessKind::FirstOrder).unwrap();
        assert!(SlopeGate::new("second", 1.7, 2.3, 0.98).check(&second).passed, "{:?}", second.fit);
        assert!(SlopeGate::new("first", 0.8, 1.3, 0.98).check(&first).passed, "{:?}", first.fit);
        assert_eq!(second.notes["correction_method"], "closed-form-finite-n");
        let d = defect_sweep(&c, &grid(), MemorylessKind::SECOND_ORDER).unwrap();
        assert!(SlopeGate::new("defect", 2.7, 3.3, 0.98).check(&d.report).passed, "{:?}", d.report.fit);
        assert_eq!(d.defects[0].len(), 50);
    }

    #[test]
    fn no_memory_sweep_is_degenerate() {
        let r = global_error_sweep(&hb_config(0.0), &grid(), MemorylessKind::SECOND_ORDER).unwrap();
        assert_eq!(r.status(), "degenerate");
        assert!(r.points.iter().all(|p| p.status == PointStatus::BelowFloor));
        assert!(!SlopeGate::new("g", 1.7, 2.3, 0.98).check(&r).passed);
    }

    #[test]
    fn points_are_sorted_and_domain_exits_marked() {
        let mut c = hb_config(0.5);
        c.domain_radius = 50.0;
        c.horizon = 10.0;
        let hs = [0.01, 1.5, 0.02, 0.005];
        let r = global_error_sweep(&c, &hs, MemorylessKind::FirstOrder).unwrap();
        let got: Vec<f64> = r.points.iter().map(|p| p.h).collect();
        assert_eq!(got, vec![1.5, 0.02, 0.01, 0.005]);
        assert_eq!(r.points[0].status, PointStatus::DomainExit);
        assert_eq!(r.points[0].metric, None);
        assert_eq!(r.fit.unwrap().used, 3);
    }

    #[test]
    fn closeness_starts_at_zero_and_orders_after_burn_in() {
        let c = hb_config(0.5);
        let s = trajectory_closeness(&c, &[0.01, 0.005]).unwrap();
        for x in &s {
            assert_eq!(x.second_order[0], 0.0);
            assert_eq!(x.first_order[0], 0.0);
            assert_eq!(x.burn_in, 34);
            assert!(x.ordered_fraction().unwrap() >= 0.95);
        }
        // halving h: second-order gap ~4x smaller, first-order ~2x, at t = 1
        let r2 = s[0].second_order.last().unwrap() / s[1].second_order.last().unwrap();
        let r1 = s[0].first_order.last().unwrap() / s[1].first_order.last().unwrap();
        assert!((3.0..5.0).contains(&r2), "{r2}");
        assert!((1.6..2.4).contains(&r1), "{r1}");
    }

    #[test]
    fn csv_outputs_are_reproducible() {
        let c = hb_config(0.5);
        let render = || {
            let r = global_error_sweep(&c, &grid(), MemorylessKind::SECOND_ORDER).unwrap();
            let mut out = Vec::new();
            r.write_csv(&mut out).unwrap();
            let s = trajectory_closeness(&c, &[0.02]).unwrap();
            write_closeness_csv(&s, &mut out).unwrap();
            out
        };
        let a = render();
        assert_eq!(a, render());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("h,metric,status\n0.02,"));
    }

    #[test]
    fn short_grids_are_rejected() {
        let c = hb_config(0.5);
        assert!(global_error_sweep(&c, &[0.1, 0.05], MemorylessKind::FirstOrder).is_err());
        assert!(global_error_sweep(&c, &[0.1, 0.05, -1.0], MemorylessKind::FirstOrder).is_err());
    }

    proptest! {
        #[test]
        fn fitted_slope_is_scale_invariant(p in 0.5f64..4.0, scale in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = stream_rng(seed, Stream::Probe);
            let hs: Vec<f64> = (0..6).map(|j| 0.1 * 0.5f64.powi(j)).collect();
            let noise: Vec<f64> = hs.iter().map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
            let pts = |c: f64| -> Vec<(f64, f64)> {
                hs.iter().zip(&noise).map(|(&h, e)| (h, (c + e).exp() * h.powf(p))).collect()
            };
            let a = fit_loglog(&pts(0.0)).unwrap();
            let b = fit_loglog(&pts(scale)).unwrap();
            prop_assert!((a.slope - b.slope).abs() < 1e-9);
            prop_assert!((b.intercept - a.intercept - scale).abs() < 1e-9);
            prop_assert!(a.r2 <= 1.0 + 1e-12);
        }
    }
}
