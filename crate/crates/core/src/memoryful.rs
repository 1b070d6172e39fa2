//! The optimizers themselves, in two independent implementations: explicit
//! summation over the stored history, and an O(1)-state recursion on the
//! momentum variables.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::LossModel;
use crate::momentum::{channels, combine, Horizon};
use crate::spec::{KSpec, OptimizerKind, OptimizerSpec};
use crate::trajectory::{drive, Trajectory};
use crate::vector::{softsign_unchecked, ParamVector};

/// Accepted iterates `theta^(0..=n)`, optionally keeping only the most
/// recent `truncation + 1` of them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryBuffer {
    iterates: Vec<ParamVector>,
    dropped: usize,
    truncation: Option<usize>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps at most `k + 1` iterates. Dropping lags beyond `k` biases the
    /// update by at most `(max beta)^k` relative to full retention.
    pub fn truncated(k: usize) -> Self {
        Self {
            truncation: Some(k),
            ..Self::default()
        }
    }

    pub fn push(&mut self, theta: ParamVector) {
        self.iterates.push(theta);
        if let Some(k) = self.truncation {
            if self.iterates.len() > k + 1 {
                self.iterates.remove(0);
                self.dropped += 1;
            }
        }
    }

    /// Index `n` of the newest iterate.
    pub fn step(&self) -> Option<usize> {
        (!self.iterates.is_empty()).then(|| self.dropped + self.iterates.len() - 1)
    }

    /// `theta^(n-k)`, if retained.
    pub fn lag(&self, k: usize) -> Option<&ParamVector> {
        let len = self.iterates.len();
        (k < len).then(|| &self.iterates[len - 1 - k])
    }

    pub fn lag_mut(&mut self, k: usize) -> Option<&mut ParamVector> {
        let len = self.iterates.len();
        (k < len).then(|| &mut self.iterates[len - 1 - k])
    }

    pub fn retained(&self) -> usize {
        self.iterates.len()
    }
}

impl FromIterator<ParamVector> for HistoryBuffer {
    fn from_iter<I: IntoIterator<Item = ParamVector>>(iter: I) -> Self {
        let mut h = Self::new();
        for t in iter {
            h.push(t);
        }
        h
    }
}

/// `sum_k c^(n-k) x_k` over the retained lags, newest first.
fn decayed_sum(grads: &[ParamVector], c: f64) -> ParamVector {
    let mut acc = ParamVector::zeros(grads[0].len());
    let mut w = 1.0;
    for g in grads {
        acc.axpy(w, g);
        w *= c;
    }
    acc
}

fn adam_like(spec: &OptimizerSpec, n: usize, grads: &[ParamVector], theta: &ParamVector) -> ParamVector {
    let (b1, b2) = (spec.beta1, spec.beta2);
    let (c1, c2) = if spec.bias_correction {
        (
            (1.0 - b1) / (1.0 - b1.powi(n as i32 + 1)),
            (1.0 - b2) / (1.0 - b2.powi(n as i32 + 1)),
        )
    } else {
        (1.0 - b1, 1.0 - b2)
    };
    let squares: Vec<ParamVector> = grads.iter().map(|g| g.hadamard(g)).collect();
    let m1 = decayed_sum(grads, b1) * c1;
    let m2 = decayed_sum(&squares, b2) * c2;
    let m3 = theta * spec.lambda;
    let num = if spec.kind == OptimizerKind::NAdamW {
        let m4 = &grads[0];
        m1.zip_map(m4, |a, b| b1 * a + (1.0 - b1) * b)
    } else {
        m1
    };
    let den = m2.map(|x| (x + spec.eps).sqrt());
    num.zip_map(&den, |a, b| a / b) + &m3
}

fn lion(spec: &OptimizerSpec, n: usize, grads: &[ParamVector], theta: &ParamVector) -> ParamVector {
    let (r1, r2) = (spec.beta1, spec.beta2);
    let momentum = if r2 > 0.0 {
        let bias = if spec.bias_correction {
            1.0 / (1.0 - r2.powi(n as i32 + 1))
        } else {
            1.0
        };
        let m1 = decayed_sum(grads, r2) * (-(1.0 - r2) * bias * r1 / r2);
        let m2 = &grads[0] * (-(1.0 - r1 / r2));
        m1 + &m2
    } else {
        // rho2 = 0: the sum collapses to the current and previous gradients;
        // with bias correction the first step sees the full gradient
        let lead = if spec.bias_correction && n == 0 { 1.0 } else { 1.0 - r1 };
        let mut m = &grads[0] * -lead;
        if n >= 1 && grads.len() > 1 {
            m.axpy(-r1, &grads[1]);
        }
        m
    };
    let direction = match spec.kspec {
        KSpec::SmoothedOneNorm => softsign_unchecked(&momentum, spec.eps),
        KSpec::HalfSquaredTwoNorm => momentum,
        KSpec::OneNorm => momentum.map(|x| if x == 0.0 { 0.0 } else { x.signum() }),
    };
    -direction + &(theta * spec.lambda)
}

/// `F^(n)(theta^(n), ..., theta^(0))` by explicit summation over `hist`.
pub fn eval_f_history(spec: &OptimizerSpec, loss: &dyn LossModel, hist: &HistoryBuffer) -> Result<ParamVector> {
    let n = hist.step().ok_or(Error::EmptyHistory)?;
    let theta = hist.lag(0).expect("non-empty");
    let grads: Vec<ParamVector> = (0..hist.retained())
        .map(|k| loss.grad(hist.lag(k).expect("retained")))
        .collect();
    let f = match spec.kind {
        OptimizerKind::HeavyBall => decayed_sum(&grads, spec.beta1),
        OptimizerKind::Nesterov => decayed_sum(&grads, spec.beta1) * spec.beta1 + &grads[0],
        OptimizerKind::AdamW | OptimizerKind::NAdamW => adam_like(spec, n, &grads, theta),
        OptimizerKind::LionK => lion(spec, n, &grads, theta),
    };
    Ok(f)
}

/// Momentum variables carried between steps.
///
/// For each variable `m_l = lead(n) f_l(theta^(n)) + tail(n) p_l` where
/// `p_l = sum_{k>=1} decay^(k-1) f_l(theta^(n-k))` is updated recursively.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    spec: OptimizerSpec,
    n: usize,
    tails: Vec<ParamVector>,
    moments: Vec<ParamVector>,
}

impl MomentumState {
    pub fn new(spec: OptimizerSpec, dim: usize) -> Self {
        let q = channels(&spec, Horizon::Step(0)).len();
        Self {
            spec,
            n: 0,
            tails: vec![ParamVector::zeros(dim); q],
            moments: Vec::new(),
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Index of the next step.
    pub fn step_index(&self) -> usize {
        self.n
    }

    /// Momentum variables `m_l^(n)` from the most recent step.
    pub fn moments(&self) -> &[ParamVector] {
        &self.moments
    }

    /// Computes `F^(n)` at the current iterate and advances to step `n + 1`.
    pub fn advance(&mut self, loss: &dyn LossModel, theta: &ParamVector) -> ParamVector {
        let chans = channels(&self.spec, Horizon::Step(self.n));
        let grad = loss.grad(theta);
        let mut moments = Vec::with_capacity(chans.len());
        for (c, p) in chans.iter().zip(self.tails.iter_mut()) {
            let f = c.feature.eval(theta, &grad);
            let mut m = &f * c.weights.lead;
            m.axpy(c.weights.tail, p);
            moments.push(m);
            *p = f + &(&*p * c.weights.decay);
        }
        let out = combine(&self.spec, &moments);
        self.moments = moments;
        self.n += 1;
        out
    }
}

/// One memoryful step from the momentum state: returns `theta^(n+1)` and
/// the advanced state.
pub fn step_state(
    loss: &dyn LossModel,
    state: &MomentumState,
    theta: &ParamVector,
) -> Result<(ParamVector, MomentumState)> {
    let mut next = state.clone();
    let f = next.advance(loss, theta);
    let mut out = theta.clone();
    out.axpy(-state.spec.h, &f);
    if !loss.contains(&out) {
        return Err(Error::DomainExit {
            step: state.n + 1,
            norm: out.linf_norm(),
            radius: loss.domain_radius(),
        });
    }
    Ok((out, next))
}

pub fn run_memoryful_with(
    loss: &dyn LossModel,
    spec: &OptimizerSpec,
    theta0: ParamVector,
    horizon: f64,
) -> Trajectory {
    let mut state = MomentumState::new(*spec, theta0.len());
    drive(loss, spec.h, horizon, theta0, |_, theta| {
        let f = state.advance(loss, theta);
        let mut next = theta.clone();
        next.axpy(-spec.h, &f);
        Ok(next)
    })
}

/// Stepping through [`eval_f_history`] instead of the momentum state.
/// Quadratic in the number of steps; meant for cross-checks.
pub fn run_memoryful_history(
    loss: &dyn LossModel,
    spec: &OptimizerSpec,
    theta0: ParamVector,
    horizon: f64,
) -> Trajectory {
    let mut hist = HistoryBuffer::new();
    drive(loss, spec.h, horizon, theta0, |_, theta| {
        hist.push(theta.clone());
        let f = eval_f_history(spec, loss, &hist)?;
        let mut next = theta.clone();
        next.axpy(-spec.h, &f);
        Ok(next)
    })
}

/// Runs the configured optimizer for `floor(T / h)` steps. A domain exit is
/// recorded on the returned trajectory.
pub fn run_memoryful(config: &RunConfig) -> Result<Trajectory> {
    let loss = config.build_loss()?;
    let theta0 = config.initial_point()?;
    Ok(run_memoryful_with(loss.as_ref(), &config.optimizer, theta0, config.horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitialTheta, LossSpec};
    use crate::loss::{make_quadratic, random_logistic, random_quadratic};
    use crate::rng::{stream_rng, Stream};
    use crate::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn identity_loss(d: usize) -> impl LossModel {
        make_quadratic(DMatrix::identity(d, d), ParamVector::zeros(d)).unwrap()
    }

    fn random_spec<R: Rng>(kind: OptimizerKind, rng: &mut R) -> OptimizerSpec {
        let b1 = rng.random_range(0.0..0.95);
        let b2 = rng.random_range(0.0..0.99);
        let lam = rng.random_range(0.0..0.5);
        let eps = 10f64.powf(rng.random_range(-6.0..-2.0));
        let bias = rng.random::<bool>();
        let s = match kind {
            OptimizerKind::HeavyBall => OptimizerSpec::heavy_ball(0.01, b1),
            OptimizerKind::Nesterov => OptimizerSpec::nesterov(0.01, b1),
            OptimizerKind::AdamW => OptimizerSpec::adamw(0.01, b1, b2, lam, eps),
            OptimizerKind::NAdamW => OptimizerSpec::nadamw(0.01, b1, b2, lam, eps),
            OptimizerKind::LionK => {
                OptimizerSpec::lion_k(0.01, b1, b2, lam, eps, KSpec::SmoothedOneNorm)
            }
        };
        s.with_bias_correction(bias)
    }

    #[test]
    fn empty_history_is_an_error() {
        let l = identity_loss(1);
        let s = OptimizerSpec::heavy_ball(0.1, 0.5);
        assert_eq!(eval_f_history(&s, &l, &HistoryBuffer::new()), Err(Error::EmptyHistory));
    }

    #[test]
    fn heavy_ball_history_examples() {
        let l = identity_loss(1);
        let s = OptimizerSpec::heavy_ball(0.1, 0.5);
        let h0: HistoryBuffer = [pv(&[3.0])].into_iter().collect();
        assert_eq!(eval_f_history(&s, &l, &h0).unwrap(), pv(&[3.0]));
        let h1: HistoryBuffer = [pv(&[1.0]), pv(&[2.0])].into_iter().collect();
        assert_eq!(eval_f_history(&s, &l, &h1).unwrap(), pv(&[2.5]));
    }

    /// `L = g . theta`: the same gradient everywhere.
    #[derive(Debug)]
    struct Linear(ParamVector);

    impl LossModel for Linear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn value(&self, t: &ParamVector) -> f64 {
            self.0.dot(t)
        }
        fn grad(&self, _: &ParamVector) -> ParamVector {
            self.0.clone()
        }
        fn hvp(&self, _: &ParamVector, v: &ParamVector) -> ParamVector {
            ParamVector::zeros(v.len())
        }
        fn domain_radius(&self) -> f64 {
            1e3
        }
    }

    #[test]
    fn adam_with_constant_gradient_is_normalized() {
        let g = pv(&[0.3, -2.0]);
        let l = Linear(g.clone());
        let s = OptimizerSpec::adamw(0.1, 0.9, 0.999, 0.0, 1e-8);
        let mut hist = HistoryBuffer::new();
        for n in 0..30 {
            hist.push(pv(&[n as f64, 1.0]));
            let f = eval_f_history(&s, &l, &hist).unwrap();
            let expect = g.map(|x| x / (x * x + 1e-8).sqrt());
            assert!((f - expect).linf_norm() < 1e-12);
        }
    }

    #[test]
    fn nadam_with_zero_beta1_is_adam() {
        let l = random_logistic(20, 3, 0.0, &mut stream_rng(1, Stream::Loss)).unwrap();
        let mut rng = stream_rng(1, Stream::Probe);
        let adam = OptimizerSpec::adamw(0.1, 0.0, 0.9, 0.1, 1e-6);
        let nadam = OptimizerSpec::nadamw(0.1, 0.0, 0.9, 0.1, 1e-6);
        let mut hist = HistoryBuffer::new();
        for _ in 0..15 {
            hist.push(pv(&[rng.random(), rng.random(), rng.random()]));
            let a = eval_f_history(&adam, &l, &hist).unwrap();
            let b = eval_f_history(&nadam, &l, &hist).unwrap();
            assert!((a - b).linf_norm() <= 1e-15);
        }
    }

    #[test]
    fn history_and_state_agree_on_logistic() {
        let l = random_logistic(60, 5, 0.01, &mut stream_rng(2, Stream::Loss)).unwrap();
        let theta0 = pv(&[0.5, -0.3, 0.2, 0.1, -0.4]);
        let mut rng = stream_rng(2, Stream::Probe);
        for kind in OptimizerKind::ALL {
            let spec = random_spec(kind, &mut rng);
            let a = run_memoryful_with(&l, &spec, theta0.clone(), 2.0);
            let b = run_memoryful_history(&l, &spec, theta0.clone(), 2.0);
            assert_eq!(a.len(), 201);
            let gap = a.gaps(&b).into_iter().fold(0.0, f64::max);
            assert!(gap <= 1e-12, "{kind}: {gap}");
        }
    }

    #[test]
    fn state_moments_match_direct_sums() {
        let l = random_logistic(30, 3, 0.0, &mut stream_rng(3, Stream::Loss)).unwrap();
        let spec = OptimizerSpec::adamw(0.05, 0.8, 0.9, 0.0, 1e-6);
        let mut state = MomentumState::new(spec, 3);
        let mut thetas = vec![pv(&[0.2, 0.1, -0.3])];
        for _ in 0..25 {
            let f = state.advance(&l, thetas.last().unwrap());
            let mut next = thetas.last().unwrap().clone();
            next.axpy(-spec.h, &f);
            thetas.push(next);
        }
        let n = 24;
        let b1 = (1.0 - 0.8) / (1.0 - 0.8f64.powi(n + 1));
        let mut m1 = ParamVector::zeros(3);
        for k in 0..=n as usize {
            m1.axpy(b1 * 0.8f64.powi((n as usize - k) as i32), &l.grad(&thetas[k]));
        }
        assert!((&state.moments()[0] - &m1).linf_norm() < 1e-14);
    }

    #[test]
    fn weight_decay_alone_contracts_geometrically() {
        let zero = Linear(ParamVector::zeros(2));
        let spec = OptimizerSpec::adamw(0.1, 0.9, 0.99, 0.5, 1e-8);
        let t = run_memoryful_with(&zero, &spec, pv(&[1.0, -2.0]), 1.0);
        for (n, th) in t.iterates.iter().enumerate() {
            let f = 0.95f64.powi(n as i32);
            assert!((th - &pv(&[f, -2.0 * f])).linf_norm() < 1e-12);
        }
    }

    #[test]
    fn heavy_ball_without_momentum_is_gradient_descent() {
        let mut rng = stream_rng(4, Stream::Loss);
        let q = random_quadratic(3, 0.1, 2.0, 1.0, &mut rng).unwrap();
        let theta0 = pv(&[1.0, 2.0, 3.0]);
        let t = run_memoryful_with(&q, &OptimizerSpec::heavy_ball(0.1, 0.0), theta0.clone(), 1.0);
        let mut x = theta0;
        for th in &t.iterates {
            assert_eq!(th, &x);
            let g = q.grad(&x);
            x.axpy(-0.1, &g);
        }
    }

    #[test]
    fn horizon_controls_step_count() {
        let cfg = RunConfig {
            seed: 1,
            dim: 2,
            horizon: 0.05,
            loss: LossSpec::Quartic { a: 1.0 },
            optimizer: OptimizerSpec::heavy_ball(0.1, 0.5),
            initial_theta: InitialTheta::Constant { value: 0.5 },
            domain_radius: 1e3,
        };
        assert_eq!(run_memoryful(&cfg).unwrap().len(), 1);
        let mut c = cfg.clone();
        c.horizon = 1.0;
        let a = run_memoryful(&c).unwrap().len();
        c.horizon = 2.0;
        let b = run_memoryful(&c).unwrap().len();
        assert_eq!((a - 1) * 2, b - 1);
    }

    #[test]
    fn heavy_ball_loss_decreases_after_burn_in() {
        let mut rng = stream_rng(5, Stream::Loss);
        let q = random_quadratic(4, 0.5, 2.0, 1.0, &mut rng).unwrap();
        let spec = OptimizerSpec::heavy_ball(0.01, 0.5);
        let t = run_memoryful_with(&q, &spec, pv(&[2.0, -1.0, 1.0, 3.0]), 2.0);
        let burn = spec.burn_in(1e-10);
        assert!(t.loss[burn..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn lion_with_half_squared_norm_is_rescaled_heavy_ball() {
        let q = random_quadratic(3, 0.2, 2.0, 1.0, &mut stream_rng(6, Stream::Loss)).unwrap();
        let theta0 = pv(&[1.0, -1.0, 0.5]);
        for beta in [0.3, 0.5, 0.9] {
            let h = 0.01;
            let hb = run_memoryful_with(&q, &OptimizerSpec::heavy_ball(h, beta), theta0.clone(), 1.0);
            // (1 - beta) sum beta^k grad: heavy-ball's direction scaled by (1 - beta)
            let lion = OptimizerSpec::lion_k(h / (1.0 - beta), beta, beta, 0.0, 1e-8, KSpec::HalfSquaredTwoNorm);
            let li = run_memoryful_with(&q, &lion, theta0.clone(), (hb.len() - 1) as f64 * h / (1.0 - beta));
            assert_eq!(hb.len(), li.len());
            let gap = hb.gaps(&li).into_iter().fold(0.0, f64::max);
            assert!(gap <= 1e-10, "beta {beta}: {gap}");
        }
    }

    #[test]
    fn exact_sign_lion_runs() {
        let q = random_quadratic(3, 0.2, 2.0, 1.0, &mut stream_rng(7, Stream::Loss)).unwrap();
        let spec = OptimizerSpec::lion_k(0.01, 0.9, 0.99, 0.0, 1e-8, KSpec::OneNorm);
        let t = run_memoryful_with(&q, &spec, pv(&[1.0, -1.0, 0.0]), 0.5);
        assert!(t.is_complete());
        // every step moves each coordinate by exactly h (or not at all)
        for w in t.iterates.windows(2) {
            for (a, b) in w[0].iter().zip(w[1].iter()) {
                let d = (a - b).abs();
                assert!(d == 0.0 || (d - 0.01).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn truncated_history_keeps_recent_lags() {
        let mut h = HistoryBuffer::truncated(2);
        for i in 0..5 {
            h.push(pv(&[i as f64]));
        }
        assert_eq!(h.step(), Some(4));
        assert_eq!(h.retained(), 3);
        assert_eq!(h.lag(0), Some(&pv(&[4.0])));
        assert_eq!(h.lag(2), Some(&pv(&[2.0])));
        assert_eq!(h.lag(3), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn history_state_equivalence(seed in 0u64..10_000, kind_ix in 0usize..5) {
            let mut rng = stream_rng(seed, Stream::Probe);
            let q = random_quadratic(3, 0.1, 3.0, 1.0, &mut rng).unwrap();
            let spec = random_spec(OptimizerKind::ALL[kind_ix], &mut rng);
            let theta0 = pv(&[rng.random(), rng.random(), rng.random()]);
            let a = run_memoryful_with(&q, &spec, theta0.clone(), 1.0);
            prop_assert_eq!(a.len(), 101);
            // one step at a time: small eps makes the map expansive, so whole
            // trajectories drift apart at rounding level times 2^n
            for n in 0..100 {
                let hist: HistoryBuffer = a.iterates[..=n].iter().cloned().collect();
                let f = eval_f_history(&spec, &q, &hist).unwrap();
                let next = &a.iterates[n] - &(f * spec.h);
                let gap = (&next - &a.iterates[n + 1]).linf_norm();
                prop_assert!(gap <= 1e-13 * (1.0 + next.linf_norm()), "step {}: {}", n, gap);
            }
        }

        #[test]
        fn memory_decays_geometrically(seed in 0u64..10_000, kind_ix in 0usize..5) {
            let mut rng = stream_rng(seed, Stream::Probe);
            let l = random_logistic(20, 3, 0.1, &mut rng).unwrap();
            let mut spec = random_spec(OptimizerKind::ALL[kind_ix], &mut rng);
            spec.beta1 = spec.beta1.min(0.8);
            spec.beta2 = spec.beta2.min(0.8);
            spec.eps = 1e-2;
            let hist: HistoryBuffer = (0..30)
                .map(|_| pv(&[rng.random(), rng.random(), rng.random()]))
                .collect();
            let base = eval_f_history(&spec, &l, &hist).unwrap();
            let rate = spec.max_decay().max(1e-3);
            let delta = 1e-6;
            let mut ratios = Vec::new();
            for k in 1..=20 {
                let mut h = hist.clone();
                for j in 0..3 {
                    h.lag_mut(k).unwrap()[j] += delta;
                }
                let moved = eval_f_history(&spec, &l, &h).unwrap();
                let sens = (moved - &base).linf_norm() / delta;
                ratios.push(sens / rate.powi(k as i32));
            }
            // a single constant bounds every lag (allow for rounding once the response is tiny)
            let c = ratios[0].max(1.0) * 10.0;
            for (k, r) in ratios.iter().enumerate() {
                let absolute = r * rate.powi(k as i32 + 1);
                prop_assert!(*r <= c || absolute <= 1e-8, "lag {}: ratio {}", k + 1, r);
            }
        }
    }
}
