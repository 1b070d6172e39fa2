//! Memory correction for an exponential moving sum of mini-batch gradients
//! `F^(n) = sum_k beta^k g^(pi(n-k))(theta^(n-k))` over one epoch of
//! `n + 1` batches visited in a uniformly random order `pi`, averaged over
//! orderings.

use std::io::{self, Write};

use itertools::Itertools;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::correction::Regime;
use crate::error::{invalid, Error, Result};
use crate::loss::{LossModel, MiniBatchFamily};
use crate::rng::{chunk_rng, Stream};
use crate::vector::ParamVector;

/// Largest family enumerated exhaustively (`7! = 5040` orderings).
pub const MAX_EXHAUSTIVE_BATCHES: usize = 7;

pub const MIN_MC_SAMPLES: usize = 100;

const MC_CHUNK: usize = 1024;

/// Weights of the same-batch and cross-batch expectations in the averaged
/// correction: `E[c] / h = c_eq E[J_i g_i] + c_neq E[J_i g_j], i != j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PermutationCoefficients {
    pub c_eq: f64,
    pub c_neq: f64,
    /// `None` for the limit.
    pub n: Option<usize>,
    pub beta: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(invalid("beta", format!("must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// Exact sums for `n + 1` batches, or their limits.
pub fn perm_coefficients(beta: f64, regime: Regime) -> Result<PermutationCoefficients> {
    check_beta(beta)?;
    let (c_eq, c_neq, n) = match regime {
        Regime::Asymptotic => {
            let c_eq = beta / ((1.0 - beta).powi(2) * (1.0 + beta));
            let c_neq = 2.0 * beta * beta / ((1.0 - beta).powi(3) * (1.0 + beta));
            (c_eq, c_neq, None)
        }
        Regime::Step(n) => {
            // same-index pairs: sum_k beta^k sum_{j=0}^{k} beta^j
            let mut c_eq = 0.0;
            // all pairs: sum_k beta^k sum_{l=1}^{k+1} sum_{b=0}^{n-l} beta^b
            let mut all = 0.0;
            let mut bk = 1.0;
            for k in 0..n {
                let mut inner_eq = 0.0;
                let mut inner_all = 0.0;
                for l in 1..=k + 1 {
                    inner_eq += beta.powi((k + 1 - l) as i32);
                    inner_all += (0..=n - l).map(|b| beta.powi(b as i32)).sum::<f64>();
                }
                c_eq += bk * inner_eq;
                all += bk * inner_all;
                bk *= beta;
            }
            (beta * c_eq, beta * (all - c_eq), Some(n))
        }
    };
    Ok(PermutationCoefficients { c_eq, c_neq, n, beta })
}

struct Evaluated {
    grads: Vec<ParamVector>,
}

impl Evaluated {
    fn new(family: &MiniBatchFamily, theta: &ParamVector) -> Self {
        Self {
            grads: (0..family.len()).map(|k| family.grad(k, theta)).collect(),
        }
    }
}

/// `h beta sum_k beta^k J_(pi(n-1-k)) V_k` with `V_k` the running sum of the
/// frozen updates `F^(n-1)`, ..., `F^(n-1-k)`.
fn correction_for_order(
    family: &MiniBatchFamily,
    ev: &Evaluated,
    order: &[usize],
    beta: f64,
    theta: &ParamVector,
    h: f64,
) -> ParamVector {
    let n = order.len() - 1;
    let dim = theta.len();
    // frozen[s] = F^(s) = g^(pi(s)) + beta F^(s-1)
    let mut frozen = Vec::with_capacity(n);
    let mut f = ParamVector::zeros(dim);
    for &b in &order[..n] {
        f = &ev.grads[b] + &(&f * beta);
        frozen.push(f.clone());
    }
    let mut out = ParamVector::zeros(dim);
    let mut window = ParamVector::zeros(dim);
    let mut bk = 1.0;
    for k in 0..n {
        window += &frozen[n - 1 - k];
        out.axpy(bk, &family.jvp(order[n - 1 - k], theta, &window));
        bk *= beta;
    }
    out * (h * beta)
}

fn check_family(family: &MiniBatchFamily, theta: &ParamVector) -> Result<()> {
    if family.len() < 2 {
        return Err(invalid("count", "need at least 2 batches"));
    }
    if family.dim() != theta.len() {
        return Err(Error::LengthMismatch {
            left: family.dim(),
            right: theta.len(),
        });
    }
    Ok(())
}

/// Correction for one explicit ordering of the batches.
pub fn correction_for_permutation(
    family: &MiniBatchFamily,
    order: &[usize],
    beta: f64,
    theta: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    check_beta(beta)?;
    check_family(family, theta)?;
    if !order.iter().copied().sorted().eq(0..family.len()) {
        return Err(invalid("order", "must be a permutation of the batch indices"));
    }
    Ok(correction_for_order(family, &Evaluated::new(family, theta), order, beta, theta, h))
}

/// Exact average over all `(n + 1)!` orderings. Summation runs in
/// lexicographic order, independent of the thread count.
pub fn expected_correction_exhaustive(
    family: &MiniBatchFamily,
    beta: f64,
    theta: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    check_beta(beta)?;
    check_family(family, theta)?;
    if family.len() > MAX_EXHAUSTIVE_BATCHES {
        return Err(Error::FamilyTooLarge {
            size: family.len(),
            max: MAX_EXHAUSTIVE_BATCHES,
        });
    }
    let ev = Evaluated::new(family, theta);
    let orders: Vec<Vec<usize>> = (0..family.len()).permutations(family.len()).collect();
    let terms: Vec<ParamVector> = orders
        .par_iter()
        .map(|o| correction_for_order(family, &ev, o, beta, theta, h))
        .collect();
    let mut sum = ParamVector::zeros(theta.len());
    for t in &terms {
        sum += t;
    }
    Ok(sum * (1.0 / orders.len() as f64))
}

/// Running mean and sum of squared deviations per component.
#[derive(Clone, Debug)]
struct Moments {
    count: f64,
    mean: ParamVector,
    m2: ParamVector,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: ParamVector::zeros(dim),
            m2: ParamVector::zeros(dim),
        }
    }

    fn push(&mut self, x: &ParamVector) {
        self.count += 1.0;
        let delta = x - &self.mean;
        self.mean.axpy(1.0 / self.count, &delta);
        let after = x - &self.mean;
        self.m2 += &delta.hadamard(&after);
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        let delta = &other.mean - &self.mean;
        self.mean.axpy(other.count / total, &delta);
        self.m2 += &other.m2;
        self.m2.axpy(self.count * other.count / total, &delta.hadamard(&delta));
        self.count = total;
    }
}

/// Mean and componentwise standard error of the correction over uniformly
/// sampled orderings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: ParamVector,
    pub stderr: ParamVector,
    pub samples: usize,
}

/// Samples are drawn in fixed-size chunks, each from its own seeded stream,
/// and merged in chunk order: results do not depend on the thread count.
pub fn expected_correction_mc(
    family: &MiniBatchFamily,
    beta: f64,
    theta: &ParamVector,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    check_beta(beta)?;
    check_family(family, theta)?;
    if samples < MIN_MC_SAMPLES {
        return Err(invalid("samples", format!("need at least {MIN_MC_SAMPLES}, got {samples}")));
    }
    let ev = Evaluated::new(family, theta);
    let chunks = samples.div_ceil(MC_CHUNK);
    let partial: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, Stream::Permutations, c as u64);
            let mut order: Vec<usize> = (0..family.len()).collect();
            let mut m = Moments::new(theta.len());
            let take = MC_CHUNK.min(samples - c * MC_CHUNK);
            for _ in 0..take {
                order.shuffle(&mut rng);
                m.push(&correction_for_order(family, &ev, &order, beta, theta, h));
            }
            m
        })
        .collect();
    let mut total = Moments::new(theta.len());
    for m in &partial {
        total.merge(m);
    }
    let n = total.count;
    let stderr = total.m2.map(|s| (s.max(0.0) / (n - 1.0) / n).sqrt());
    Ok(MonteCarloEstimate {
        mean: total.mean,
        stderr,
        samples,
    })
}

/// `mean_i J_i g_i`.
pub fn same_batch_expectation(family: &MiniBatchFamily, theta: &ParamVector) -> ParamVector {
    let k = family.len();
    let mut sum = ParamVector::zeros(theta.len());
    for i in 0..k {
        sum += &family.jvp(i, theta, &family.grad(i, theta));
    }
    sum * (1.0 / k as f64)
}

/// `sum_{i != j} J_i g_j / ((n + 1) n)`.
pub fn cross_batch_expectation(family: &MiniBatchFamily, theta: &ParamVector) -> ParamVector {
    let k = family.len();
    let grads: Vec<ParamVector> = (0..k).map(|i| family.grad(i, theta)).collect();
    let mut total = ParamVector::zeros(theta.len());
    for g in &grads {
        total += g;
    }
    let mut sum = ParamVector::zeros(theta.len());
    for (i, g) in grads.iter().enumerate() {
        sum += &family.jvp(i, theta, &(&total - g));
    }
    sum * (1.0 / (k * (k - 1)) as f64)
}

/// `h [c_eq E[J_i g_i] + c_neq E[J_i g_j]]` with the exact coefficients for
/// the family's size.
pub fn expected_correction_decomposed(
    family: &MiniBatchFamily,
    beta: f64,
    theta: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    check_family(family, theta)?;
    let c = perm_coefficients(beta, Regime::Step(family.len() - 1))?;
    let mut out = same_batch_expectation(family, theta) * c.c_eq;
    out.axpy(c.c_neq, &cross_batch_expectation(family, theta));
    Ok(out * h)
}

/// `L + h beta/(2(1-beta)^2) |grad L|^2 + h beta/(2(1-beta)(1+beta)) mean_i |grad L_i - grad L|^2`.
pub fn modified_loss_minibatch(family: &MiniBatchFamily, beta: f64, theta: &ParamVector, h: f64) -> Result<f64> {
    check_beta(beta)?;
    check_family(family, theta)?;
    let mean = family.mean_loss();
    let g = mean.grad(theta);
    let k = family.len();
    let spread = (0..k).map(|i| (&family.grad(i, theta) - &g).norm_sq()).sum::<f64>() / k as f64;
    Ok(mean.value(theta)
        + h * beta / (2.0 * (1.0 - beta).powi(2)) * g.norm_sq()
        + h * beta / (2.0 * (1.0 - beta) * (1.0 + beta)) * spread)
}

/// Averaged memoryless direction in the many-batch limit:
/// `g / (1-beta) + h [beta/(1-beta)^3 J g + c_eq (E[J_i g_i] - J g)]`, where
/// `g` and `J` belong to the mean loss.
pub fn averaged_memoryless_direction(
    family: &MiniBatchFamily,
    beta: f64,
    theta: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    check_family(family, theta)?;
    let c = perm_coefficients(beta, Regime::Asymptotic)?;
    let mean = family.mean_loss();
    let g = mean.grad(theta);
    let jg = mean.hvp(theta, &g);
    let noise = same_batch_expectation(family, theta) - &jg;
    let mut out = &g * (1.0 / (1.0 - beta));
    out.axpy(h * beta / (1.0 - beta).powi(3), &jg);
    out.axpy(h * c.c_eq, &noise);
    Ok(out)
}

/// One line of a mini-batch correction report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinibatchRow {
    pub method: &'static str,
    pub component: usize,
    pub value: f64,
    /// `None` for exact methods.
    pub stderr: Option<f64>,
}

pub fn rows(method: &'static str, value: &ParamVector, stderr: Option<&ParamVector>) -> Vec<MinibatchRow> {
    value
        .iter()
        .enumerate()
        .map(|(component, &v)| MinibatchRow {
            method,
            component,
            value: v,
            stderr: stderr.map(|s| s[component]),
        })
        .collect()
}

/// CSV with columns `method,component,value,stderr`; stderr is blank for exact methods.
pub fn write_minibatch_csv<W: Write>(rows: &[MinibatchRow], mut w: W) -> io::Result<()> {
    writeln!(w, "method,component,value,stderr")?;
    for r in rows {
        let s = r.stderr.map_or_else(String::new, |s| s.to_string());
        writeln!(w, "{},{},{},{}", r.method, r.component, r.value, s)?;
    }
    Ok(())
}
