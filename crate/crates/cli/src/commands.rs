//! One function per subcommand. Each fills the experiment defaults it uses
//! (so the manifest echoes them) and returns CSV artifacts plus gates.

use std::collections::BTreeMap;

use memlens_core::correction::{corr_table, write_corr_table, CorrRow};
use memlens_core::harness::{
    defect_sweep, global_error_sweep, trajectory_closeness, write_closeness_csv, PointStatus,
};
use memlens_core::loss::{fd_check_grad, fd_check_hvp, hessian_asymmetry, LossModel};
use memlens_core::memoryful::run_memoryful;
use memlens_core::minibatch::{
    expected_correction_decomposed, expected_correction_exhaustive, expected_correction_mc, rows,
    write_minibatch_csv, MAX_EXHAUSTIVE_BATCHES,
};
use memlens_core::ode::compare_discrete_vs_ode;
use memlens_core::rng::{stream_rng, Stream};
use memlens_core::{
    run_memoryless, CorrectionMethod, Error, LossSpec, MemorylessKind, OdeTerms, OptimizerKind, ParamVector,
    RunConfig, SlopeGate, SweepReport,
};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentSection;

#[derive(Clone, Debug, Serialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub struct Artifact {
    pub experiment: &'static str,
    pub kind: String,
    pub csv: Vec<u8>,
    pub summary: Value,
}

#[derive(Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub gates: Vec<Gate>,
    /// Printed to stdout after the gates.
    pub lines: Vec<String>,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or a request the library cannot serve: exit 2.
    Usage(String),
    /// The computation itself failed: exit 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DomainExit { .. } | Error::TooFewPoints { .. } | Error::NonFinite => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::Runtime(format!("writing csv: {e}"))
}

type CmdResult = Result<Outcome, Failure>;

fn default_grid() -> Vec<f64> {
    (0..7).map(|j| 1e-2 * 0.5f64.powi(j)).collect()
}

fn memoryless_kind(e: &mut ExperimentSection) -> Result<MemorylessKind, Failure> {
    let name = e.kind.get_or_insert_with(|| MemorylessKind::SECOND_ORDER.name().to_string());
    MemorylessKind::from_name(name).ok_or_else(|| {
        Failure::Usage(format!(
            "`experiment.kind` = {name:?} is not one of first-order, second-order, second-order-asymptotic"
        ))
    })
}

/// Slope gate with per-experiment defaults that the config may override.
fn slope_gate(e: &mut ExperimentSection, name: &str, min: f64, max: f64) -> SlopeGate {
    SlopeGate::new(
        name,
        *e.slope_min.get_or_insert(min),
        *e.slope_max.get_or_insert(max),
        *e.min_r2.get_or_insert(0.98),
    )
}

/// A fit skipped because every metric sits below the floor is reported as
/// degenerate and does not fail.
fn sweep_gate(gate: &SlopeGate, report: &SweepReport) -> Gate {
    if report.fit.is_none() && report.points.iter().all(|p| p.status == PointStatus::BelowFloor) {
        return Gate::new(gate.name.clone(), true, "degenerate: every metric is below the floor, fit skipped");
    }
    let o = gate.check(report);
    Gate::new(o.name, o.passed, o.detail)
}

fn sweep_summary(report: &SweepReport, gate: &Gate) -> Value {
    json!({
        "experiment": report.experiment,
        "kind": report.kind,
        "status": report.status(),
        "slope": report.slope(),
        "intercept": report.intercept(),
        "r2": report.r2(),
        "points": report.points,
        "notes": report.notes,
        "gates": [gate],
    })
}

fn sweep_artifact(report: &SweepReport, gate: Gate) -> CmdResult {
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(io_failure)?;
    let summary = sweep_summary(report, &gate);
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "sweep",
            kind: report.kind.clone(),
            csv,
            summary,
        }],
        lines: vec![format!(
            "slope {}",
            report.slope().map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}"))
        )],
        gates: vec![gate],
    })
}

pub fn run(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let name = e.kind.get_or_insert_with(|| "memoryful".to_string()).clone();
    let traj = if name == "memoryful" {
        run_memoryful(config)?
    } else {
        let kind = memoryless_kind(e)?;
        run_memoryless(config, kind)?
    };
    let mut csv = Vec::new();
    traj.write_csv(&mut csv).map_err(io_failure)?;
    let gate = match &traj.error {
        None => Gate::new("domain", true, format!("{} steps inside the domain", traj.len() - 1)),
        Some(err) => Gate::new("domain", false, err.to_string()),
    };
    let summary = json!({
        "experiment": "run",
        "kind": name,
        "steps": traj.len() - 1,
        "final_loss": traj.loss.last(),
        "final_grad_inf": traj.grad_inf.last(),
        "gates": [&gate],
    });
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "run",
            kind: name,
            csv,
            summary,
        }],
        lines: vec![format!("final loss {}", traj.loss.last().copied().unwrap_or(f64::NAN))],
        gates: vec![gate],
    })
}

pub fn sweep(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let kind = memoryless_kind(e)?;
    let grid = e.h_grid.get_or_insert_with(default_grid).clone();
    let report = global_error_sweep(config, &grid, kind)?;
    let gate = match kind {
        MemorylessKind::FirstOrder => slope_gate(e, "global-error-slope", 0.8, 1.3),
        MemorylessKind::SecondOrder(_) => slope_gate(e, "global-error-slope", 1.7, 2.3),
    };
    let g = sweep_gate(&gate, &report);
    sweep_artifact(&report, g)
}

pub fn defect(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let kind = memoryless_kind(e)?;
    let grid = e.h_grid.get_or_insert_with(default_grid).clone();
    let d = defect_sweep(config, &grid, kind)?;
    let gate = match kind {
        MemorylessKind::FirstOrder => slope_gate(e, "defect-slope", 1.7, 2.3),
        MemorylessKind::SecondOrder(_) => slope_gate(e, "defect-slope", 2.7, 3.3),
    };
    let g = sweep_gate(&gate, &d.report);
    let mut csv = Vec::new();
    d.write_csv(&mut csv).map_err(io_failure)?;
    let mut summary = sweep_summary(&d.report, &g);
    summary["experiment"] = json!("defect");
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "defect",
            kind: d.report.kind.clone(),
            csv,
            summary,
        }],
        lines: vec![format!(
            "sup-defect slope {}",
            d.report.slope().map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}"))
        )],
        gates: vec![g],
    })
}

pub fn closeness(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let h_list = e.h_list.get_or_insert_with(|| vec![1e-4, 3e-4]).clone();
    let min_fraction = *e.min_fraction.get_or_insert(0.95);
    let mut series = Vec::new();
    for &h in &h_list {
        let mut c = config.clone();
        c.optimizer = c.optimizer.with_h(h);
        if let Some(s) = e.lambda_times_h {
            c.optimizer = c.optimizer.with_lambda(s / h);
        }
        series.extend(trajectory_closeness(&c, &[h])?);
    }
    let mut gates = Vec::new();
    let mut per_h = Vec::new();
    for s in &series {
        let window = s.post_burn_in();
        let gate = match s.ordered_fraction() {
            Some(f) => Gate::new(
                format!("ordering h={}", s.h),
                f >= min_fraction,
                format!("{:.4} of {} post-burn-in steps ordered (need {min_fraction})", f, window.len()),
            ),
            None => Gate::new(
                format!("ordering h={}", s.h),
                false,
                format!("no steps after burn-in {} within {} steps", s.burn_in, s.second_order.len() - 1),
            ),
        };
        per_h.push(json!({
            "h": s.h,
            "burn_in": s.burn_in,
            "post_burn_in_steps": window.len(),
            "ordered_fraction": s.ordered_fraction(),
        }));
        gates.push(gate);
    }
    let mut csv = Vec::new();
    write_closeness_csv(&series, &mut csv).map_err(io_failure)?;
    let summary = json!({ "experiment": "closeness", "series": per_h, "gates": &gates });
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "closeness",
            kind: config.optimizer.kind.name().to_string(),
            csv,
            summary,
        }],
        gates,
        lines: Vec::new(),
    })
}

pub fn ode_compare(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let name = e.terms.get_or_insert_with(|| OdeTerms::WithCorrection.name().to_string()).clone();
    let terms = [OdeTerms::LeadingOnly, OdeTerms::WithCorrection]
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| Failure::Usage(format!("`experiment.terms` = {name:?} is not leading-only or with-correction")))?;
    let grid = e.h_grid.get_or_insert_with(default_grid).clone();
    let report = compare_discrete_vs_ode(config, &grid, terms)?;
    let gate = match terms {
        OdeTerms::LeadingOnly => slope_gate(e, "ode-slope", 0.8, 1.3),
        OdeTerms::WithCorrection => slope_gate(e, "ode-slope", 1.7, 2.3),
    };
    let g = sweep_gate(&gate, &report);
    let mut out = sweep_artifact(&report, g)?;
    out.artifacts[0].experiment = "ode-compare";
    Ok(out)
}

pub fn minibatch_corr(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    if config.optimizer.kind != OptimizerKind::HeavyBall {
        return Err(Failure::Usage(format!(
            "`optimizer.kind` must be heavy-ball for minibatch-corr, got {}",
            config.optimizer.kind
        )));
    }
    let family = config.minibatch_family()?;
    let theta = config.initial_point()?;
    let (beta, h) = (config.optimizer.beta1, config.optimizer.h);
    let samples = *e.samples.get_or_insert(100_000);
    let seed = *e.mc_seed.get_or_insert(config.seed);
    let decomposed = expected_correction_decomposed(&family, beta, &theta, h)?;
    let mc = expected_correction_mc(&family, beta, &theta, h, samples, seed)?;
    let mut table = Vec::new();
    let mut gates = Vec::new();
    let reference = if family.len() <= MAX_EXHAUSTIVE_BATCHES {
        let ex = expected_correction_exhaustive(&family, beta, &theta, h)?;
        let gap = rel_gap(&decomposed, &ex);
        gates.push(Gate::new("decomposition", gap <= 1e-10, format!("relative gap {gap:.3e} (need <= 1e-10)")));
        table.extend(rows("exhaustive", &ex, None));
        ex
    } else {
        decomposed.clone()
    };
    table.extend(rows("decomposed", &decomposed, None));
    table.extend(rows("monte-carlo", &mc.mean, Some(&mc.stderr)));
    let z = (0..theta.len())
        .map(|i| {
            let d = (mc.mean[i] - reference[i]).abs();
            if d == 0.0 { 0.0 } else { d / mc.stderr[i] }
        })
        .fold(0.0, f64::max);
    gates.push(Gate::new("monte-carlo", z <= 3.0, format!("worst |z| {z:.3} over {samples} samples (need <= 3)")));
    let mut csv = Vec::new();
    write_minibatch_csv(&table, &mut csv).map_err(io_failure)?;
    let summary = json!({ "experiment": "minibatch-corr", "batches": family.len(), "samples": samples, "gates": &gates });
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "minibatch-corr",
            kind: format!("batches{}", family.len()),
            csv,
            summary,
        }],
        gates,
        lines: Vec::new(),
    })
}

fn rel_gap(a: &ParamVector, b: &ParamVector) -> f64 {
    let scale = b.linf_norm();
    let d = (a - b).linf_norm();
    if d == 0.0 { 0.0 } else { d / scale }
}

/// Largest relative disagreement with the reference method, per step, in
/// step order with the limit last.
fn table_agreement(table: &[CorrRow]) -> Vec<(String, f64)> {
    let mut groups: BTreeMap<Option<usize>, BTreeMap<&'static str, Vec<f64>>> = BTreeMap::new();
    for r in table {
        groups.entry(r.n).or_default().entry(r.method.name()).or_default().push(r.value);
    }
    let mut groups: Vec<_> = groups.into_iter().collect();
    groups.sort_by_key(|(n, _)| (n.is_none(), *n));
    let mut out = Vec::new();
    for (n, methods) in groups {
        let reference = if n.is_some() { CorrectionMethod::BruteForce } else { CorrectionMethod::Contraction };
        let Some(base) = methods.get(reference.name()) else { continue };
        let scale = base.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        let worst = methods
            .values()
            .flat_map(|v| v.iter().zip(base).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let key = n.map_or_else(|| "inf".to_string(), |n| n.to_string());
        out.push((key, if worst == 0.0 { 0.0 } else { worst / scale }));
    }
    out
}

pub fn corr_table_cmd(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let steps = e.steps.get_or_insert_with(|| vec![1, 5, 50, 200]).clone();
    let tol = *e.tolerance.get_or_insert(1e-6);
    let loss = config.build_loss()?;
    let theta = config.initial_point()?;
    let table = corr_table(&config.optimizer, loss.as_ref(), &theta, &steps)?;
    let agreement = table_agreement(&table);
    let gates: Vec<Gate> = agreement
        .iter()
        .map(|(n, gap)| Gate::new(format!("agreement n={n}"), *gap <= tol, format!("relative gap {gap:.3e} (need <= {tol:e})")))
        .collect();
    let mut csv = Vec::new();
    write_corr_table(&table, &mut csv).map_err(io_failure)?;
    let agreement: BTreeMap<&str, f64> = agreement.iter().map(|(n, g)| (n.as_str(), *g)).collect();
    let summary = json!({ "experiment": "corr-table", "agreement": agreement, "gates": &gates });
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "corr-table",
            kind: config.optimizer.kind.name().to_string(),
            csv,
            summary,
        }],
        gates,
        lines: Vec::new(),
    })
}

fn loss_name(spec: &LossSpec) -> &'static str {
    match spec {
        LossSpec::Quadratic { .. } => "quadratic",
        LossSpec::Logistic { .. } => "logistic",
        LossSpec::Quartic { .. } => "quartic",
        LossSpec::MinibatchQuadratic { .. } => "minibatch-quadratic",
    }
}

pub fn gradcheck(config: &RunConfig, e: &mut ExperimentSection) -> CmdResult {
    let points = *e.points.get_or_insert(20);
    let step = *e.fd_step.get_or_insert(1e-5);
    let tol = *e.fd_tol.get_or_insert(1e-5);
    let loss = config.build_loss()?;
    let mut fixtures: Vec<(String, &dyn LossModel)> = vec![("loss".to_string(), loss.as_ref())];
    let family = config.minibatch_family().ok();
    if let Some(f) = &family {
        fixtures.extend(f.batches().iter().enumerate().map(|(k, b)| (format!("batch{k}"), b as &dyn LossModel)));
    }
    let mut rng = stream_rng(config.seed, Stream::Probe);
    let dim = config.dim;
    let mut probes = vec![config.initial_point()?];
    for _ in 0..points {
        probes.push(ParamVector::from((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()));
    }
    let dirs: Vec<ParamVector> = probes
        .iter()
        .map(|_| ParamVector::from((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    let mut csv = b"fixture,point,grad_rel_err,hvp_rel_err,asymmetry\n".to_vec();
    let (mut g, mut hv, mut sym): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (name, l) in &fixtures {
        for (i, (t, v)) in probes.iter().zip(&dirs).enumerate() {
            let (a, b, c) = (fd_check_grad(*l, t, step), fd_check_hvp(*l, t, v, step), hessian_asymmetry(*l, t));
            g = g.max(a);
            hv = hv.max(b);
            sym = sym.max(c);
            csv.extend(format!("{name},{i},{a},{b},{c}\n").bytes());
        }
    }
    let gates = vec![
        Gate::new("grad", g <= tol, format!("max relative error {g:.3e} (need <= {tol:e})")),
        Gate::new("hvp", hv <= tol, format!("max relative error {hv:.3e} (need <= {tol:e})")),
        Gate::new("symmetry", sym <= 1e-10, format!("max Hessian asymmetry {sym:.3e} (need <= 1e-10)")),
    ];
    let summary = json!({ "experiment": "gradcheck", "grad": g, "hvp": hv, "asymmetry": sym, "gates": &gates });
    Ok(Outcome {
        artifacts: vec![Artifact {
            experiment: "gradcheck",
            kind: loss_name(&config.loss).to_string(),
            csv,
            summary,
        }],
        lines: vec![format!("max rel err: grad {g:.3e}, hvp {hv:.3e}")],
        gates,
    })
}
