//! Particle driver: tilted propagation, reweighting, resampling or greedy
//! top-n selection, and normalization-constant bookkeeping.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mixture::log_sum_exp;
use crate::reward::TimeDependentReward;
use crate::rng::{standard_normal, substream, INIT_STREAM, RESAMPLE_STREAM};
use crate::tilt::{
    increment_expectation, increment_ito, increment_laplacian, increment_simplified, DriftMultiplier, LocalState,
    WeightScheme,
};
use crate::State;

/// Default ESS fraction below which the ensemble is resampled.
pub const DEFAULT_ESS_FRACTION: f64 = 0.85;

/// When to resample (sampling) or select (searching).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resampling {
    /// After every `period` steps, never after the last one.
    Every(usize),
    /// When ESS drops below `fraction * N * C`.
    EssBelow(f64),
    Never,
}

impl Default for Resampling {
    fn default() -> Self {
        Resampling::EssBelow(DEFAULT_ESS_FRACTION)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampler {
    #[default]
    Systematic,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Importance-weighted sampling of the tilted target.
    #[default]
    Sampling,
    /// Greedy clone-and-select on the look-ahead reward; no weights.
    Searching,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Particles kept after each selection (`N`).
    pub particles: usize,
    /// Copies of each particle propagated between selections (`C`).
    pub clones: usize,
    /// `0 = t_0 < ... < t_K = 1`.
    pub schedule: Vec<f64>,
    pub resampling: Resampling,
    pub resampler: Resampler,
    pub mode: Mode,
    pub chi: DriftMultiplier,
    pub weights: WeightScheme,
    pub seed: u64,
}

/// `K + 1` equally spaced times on `[0, 1]`.
pub fn uniform_schedule(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| if k == steps { 1.0 } else { k as f64 / steps as f64 }).collect()
}

impl RunConfig {
    pub fn new(particles: usize, steps: usize, seed: u64) -> Self {
        Self {
            particles,
            clones: 1,
            schedule: uniform_schedule(steps),
            resampling: Resampling::default(),
            resampler: Resampler::default(),
            mode: Mode::Sampling,
            chi: DriftMultiplier::Default,
            weights: WeightScheme::Simplified,
            seed,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.len().saturating_sub(1)
    }

    pub fn total(&self) -> usize {
        self.particles * self.clones
    }

    pub fn validate(&self, rt: &TimeDependentReward) -> Result<()> {
        if self.particles == 0 || self.clones == 0 {
            return Err(invalid("particles and clones must be positive"));
        }
        validate_schedule(&self.schedule)?;
        let k = self.steps();
        match self.resampling {
            Resampling::Every(period) => {
                if period == 0 || k % period != 0 {
                    return Err(invalid("resampling period must divide the number of steps"));
                }
            }
            Resampling::EssBelow(tau) => {
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(invalid("ESS fraction must lie in (0, 1]"));
                }
                if self.mode == Mode::Searching {
                    return Err(Error::Incompatible(
                        "searching keeps no weights; use a periodic selection or none".into(),
                    ));
                }
            }
            Resampling::Never => {}
        }
        if self.mode == Mode::Sampling {
            self.weights.check(self.chi, rt)?;
        }
        Ok(())
    }
}

pub fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 2 {
        return Err(invalid("schedule needs at least two times"));
    }
    if schedule[0] != 0.0 || schedule[schedule.len() - 1] != 1.0 {
        return Err(invalid("schedule must start at 0 and end at 1"));
    }
    if schedule.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("schedule must be strictly increasing"));
    }
    Ok(())
}

/// Flat index `i * C + j` holds clone `j` of particle `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<State>,
    pub log_weights: Vec<f64>,
    pub clones: usize,
    pub generation: usize,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    pub fn weighted_expectation<F: FnMut(&State) -> f64>(&self, h: F) -> Result<f64> {
        weighted_expectation(&self.positions, &self.log_weights, h)
    }
}

/// Pre-reset state of one resampling event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResampleEvent {
    pub step: usize,
    /// `log((1/N) sum exp(A))` before the reset.
    pub log_mean_weight: f64,
}

/// Log-weights entering step `k` and the increments `log g_k` added during it.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementLog {
    pub log_prev_weights: Vec<f64>,
    pub log_increments: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// ESS before any reset at this step.
    pub ess: f64,
    pub resampled: bool,
    /// `log Z^(k)`; `None` when searching.
    pub log_z: Option<f64>,
    /// Weighted mean of `r(X_{t,1}(x))` across the ensemble.
    pub mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub ensemble: ParticleEnsemble,
    pub mode: Mode,
    pub schedule: Vec<f64>,
    /// One record per time, `K + 1` in total.
    pub steps: Vec<StepRecord>,
    pub events: Vec<ResampleEvent>,
    /// One entry per step `1..=K`; empty when searching.
    pub increments: Vec<IncrementLog>,
}

impl RunResult {
    /// Terminal weighted expectation of `h`.
    pub fn expectation<F: FnMut(&State) -> f64>(&self, h: F) -> Result<f64> {
        self.ensemble.weighted_expectation(h)
    }

    pub fn log_z(&self, k: usize) -> Result<f64> {
        log_z_smc(self, k)
    }
}

/// Runs `f(0..n)` and collects the results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

/// `(sum w)^2 / sum w^2` with `w = exp(A)`.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let max = finite_max(log_weights)?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &a in log_weights {
        let w = (a - max).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok(s1 * s1 / s2)
}

fn finite_max(log_weights: &[f64]) -> Result<f64> {
    if log_weights.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
        return Err(Error::NonFinite);
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateEnsemble);
    }
    Ok(max)
}

/// Normalized weights `softmax(A)`.
pub fn softmax(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = finite_max(log_weights)?;
    let w: Vec<f64> = log_weights.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// `log((1/n) sum exp(A))`.
pub fn log_mean_weight(log_weights: &[f64]) -> Result<f64> {
    finite_max(log_weights)?;
    Ok(log_sum_exp(log_weights) - (log_weights.len() as f64).ln())
}

pub fn weighted_expectation<F: FnMut(&State) -> f64>(positions: &[State], log_weights: &[f64], mut h: F) -> Result<f64> {
    if positions.len() != log_weights.len() {
        return Err(Error::Dimension { expected: positions.len(), got: log_weights.len() });
    }
    let p = softmax(log_weights)?;
    let mut acc = 0.0;
    for (x, w) in positions.iter().zip(&p) {
        if *w > 0.0 {
            acc += w * h(x);
        }
    }
    Ok(acc)
}

/// Draws `count` ancestor indices with probabilities `softmax(A)`.
pub fn resample_indices<R: Rng + ?Sized>(
    log_weights: &[f64],
    count: usize,
    scheme: Resampler,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let p = softmax(log_weights)?;
    let mut cumulative = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in &p {
        acc += v;
        cumulative.push(acc);
    }
    let last = p.len() - 1;
    // Rounding may leave the total just below 1.
    let locate = |u: f64| cumulative.partition_point(|&c| c <= u * acc).min(last);
    Ok(match scheme {
        Resampler::Systematic => {
            let offset: f64 = rng.random();
            (0..count).map(|i| locate((i as f64 + offset) / count as f64)).collect()
        }
        Resampler::Multinomial => (0..count).map(|_| locate(rng.random::<f64>())).collect(),
    })
}

/// Indices of the `n` largest scores, ranked; ties keep the lower index first.
pub fn select_top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match key(scores[b]).total_cmp(&key(scores[a])) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order.truncate(n);
    order
}

/// Keeps the `n` particles with the highest `r_t` and reclones each `C` times.
pub fn top_n_select(ensemble: &ParticleEnsemble, rt: &TimeDependentReward, t: f64, n: usize) -> Result<ParticleEnsemble> {
    let scores = ensemble.positions.iter().map(|x| rt.eval(t, x)).collect::<Result<Vec<_>>>()?;
    let keep = select_top_n(&scores, n);
    let positions = reclone(&ensemble.positions, &keep, ensemble.clones);
    Ok(ParticleEnsemble {
        log_weights: vec![0.0; positions.len()],
        positions,
        clones: ensemble.clones,
        generation: ensemble.generation,
    })
}

/// Resamples `N = len / C` ancestors and reclones them; weights reset to zero.
pub fn resample<R: Rng + ?Sized>(
    ensemble: &ParticleEnsemble,
    scheme: Resampler,
    rng: &mut R,
) -> Result<(ParticleEnsemble, ResampleEvent)> {
    let event = ResampleEvent {
        step: ensemble.generation,
        log_mean_weight: log_mean_weight(&ensemble.log_weights)?,
    };
    let n = ensemble.len() / ensemble.clones;
    let ancestors = resample_indices(&ensemble.log_weights, n, scheme, rng)?;
    let positions = reclone(&ensemble.positions, &ancestors, ensemble.clones);
    Ok((
        ParticleEnsemble {
            log_weights: vec![0.0; positions.len()],
            positions,
            clones: ensemble.clones,
            generation: ensemble.generation,
        },
        event,
    ))
}

fn reclone<T: Clone>(items: &[T], keep: &[usize], clones: usize) -> Vec<T> {
    keep.iter().flat_map(|&i| core::iter::repeat_n(items[i].clone(), clones)).collect()
}

/// `Z^(k)`: pre-reset mean weights of events before `k` times the mean weight at `k`.
pub fn z_smc(result: &RunResult, k: usize) -> Result<f64> {
    Ok(log_z_smc(result, k)?.exp())
}

pub fn log_z_smc(result: &RunResult, k: usize) -> Result<f64> {
    if result.mode == Mode::Searching {
        return Err(Error::Undefined("normalization estimate after greedy selection"));
    }
    let record = result
        .steps
        .get(k)
        .ok_or_else(|| invalid(alloc::format!("step {k} beyond the run")))?;
    record.log_z.ok_or(Error::Undefined("normalization estimate"))
}

/// Log-form product of `(1/N) sum w` factors.
pub fn log_z_from_factors(event_log_means: &[f64], final_log_weights: &[f64]) -> Result<f64> {
    Ok(event_log_means.iter().sum::<f64>() + log_mean_weight(final_log_weights)?)
}

struct Advanced {
    local: LocalState,
    increment: f64,
}

fn advance_particle(
    cfg: &RunConfig,
    rt: &TimeDependentReward,
    local: &LocalState,
    index: usize,
    step: usize,
    t_next: f64,
) -> Result<Advanced> {
    let dt = t_next - local.t;
    let mut rng = substream(cfg.seed, index as u64, step as u64);
    let noise = standard_normal(&mut rng, local.x.len());
    let x_next = local.advance(dt, &noise)?;
    let next = LocalState::compute(rt, cfg.chi, t_next, &x_next)?;
    let increment = match cfg.mode {
        Mode::Searching => 0.0,
        Mode::Sampling => match cfg.weights {
            WeightScheme::Simplified => increment_simplified(local, dt),
            WeightScheme::Laplacian(h) => increment_laplacian(local, rt, dt, &h, &mut rng)?,
            WeightScheme::Ito => increment_ito(local, &next, rt, dt, &noise)?,
            WeightScheme::Expectation { samples, paper_literal } => {
                increment_expectation(local, rt, t_next, samples, paper_literal, &mut rng)?
            }
        },
    };
    if !increment.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(Advanced { local: next, increment })
}

fn mean_reward(locals: &[LocalState], log_weights: &[f64]) -> Result<f64> {
    let p = softmax(log_weights)?;
    Ok(locals.iter().zip(&p).map(|(l, w)| w * l.look.terminal).sum())
}

/// Runs the sampler serially.
pub fn run(cfg: &RunConfig, rt: &TimeDependentReward) -> Result<RunResult> {
    run_with(cfg, rt, &Serial)
}

/// Runs the sampler, propagating particles through `exec`. Results do not
/// depend on how `exec` schedules work.
pub fn run_with<E: Executor>(cfg: &RunConfig, rt: &TimeDependentReward, exec: &E) -> Result<RunResult> {
    cfg.validate(rt)?;
    let total = cfg.total();
    let steps = cfg.steps();
    let sampling = cfg.mode == Mode::Sampling;

    let start = rt.path().base().sample(cfg.particles, &mut substream(cfg.seed, INIT_STREAM, 0))?;
    let all: Vec<usize> = (0..cfg.particles).collect();
    let positions = reclone(&start, &all, cfg.clones);
    let mut locals = collect(exec.map(total, |i| LocalState::compute(rt, cfg.chi, cfg.schedule[0], &positions[i])))?;
    let mut log_w = vec![0.0; total];
    let mut log_z_events = 0.0;
    let mut records = Vec::with_capacity(steps + 1);
    records.push(StepRecord {
        step: 0,
        t: cfg.schedule[0],
        ess: total as f64,
        resampled: false,
        log_z: sampling.then_some(0.0),
        mean_reward: mean_reward(&locals, &log_w)?,
    });
    let mut events = Vec::new();
    let mut increments = Vec::with_capacity(if sampling { steps } else { 0 });

    for k in 0..steps {
        let t_next = cfg.schedule[k + 1];
        let step = k + 1;
        let advanced = collect(exec.map(total, |i| advance_particle(cfg, rt, &locals[i], i, k, t_next)))?;
        let mut incs = Vec::with_capacity(total);
        locals.clear();
        for a in advanced {
            incs.push(a.increment);
            locals.push(a.local);
        }
        if sampling {
            let prev = log_w.clone();
            for (a, g) in log_w.iter_mut().zip(&incs) {
                *a += g;
            }
            increments.push(IncrementLog { log_prev_weights: prev, log_increments: incs });
        }

        let current_ess = ess(&log_w)?;
        let log_mean = log_mean_weight(&log_w)?;
        let reward_now = mean_reward(&locals, &log_w)?;
        let trigger = step < steps
            && match cfg.resampling {
                Resampling::Every(period) => step % period == 0,
                Resampling::EssBelow(tau) => current_ess < tau * total as f64,
                Resampling::Never => false,
            };
        let log_z = sampling.then_some(log_z_events + log_mean);
        if trigger {
            let keep = if sampling {
                events.push(ResampleEvent { step, log_mean_weight: log_mean });
                log_z_events += log_mean;
                let mut rng = substream(cfg.seed, RESAMPLE_STREAM, step as u64);
                resample_indices(&log_w, cfg.particles, cfg.resampler, &mut rng)?
            } else {
                let scores: Vec<f64> = locals.iter().map(|l| l.look.value).collect();
                select_top_n(&scores, cfg.particles)
            };
            locals = reclone(&locals, &keep, cfg.clones);
            log_w.iter_mut().for_each(|a| *a = 0.0);
        }
        records.push(StepRecord {
            step,
            t: t_next,
            ess: current_ess,
            resampled: trigger,
            log_z,
            mean_reward: reward_now,
        });
    }

    Ok(RunResult {
        ensemble: ParticleEnsemble {
            positions: locals.into_iter().map(|l| l.x).collect(),
            log_weights: log_w,
            clones: cfg.clones,
            generation: steps,
        },
        mode: cfg.mode,
        schedule: cfg.schedule.clone(),
        steps: records,
        events,
        increments,
    })
}

fn collect<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmap::FlowMapEvaluator;
    use crate::mixture::GaussianMixture;
    use crate::ode::Tolerances;
    use crate::path::MixturePath;
    use crate::reward::{LookAhead, Reward};
    use crate::schedule::InterpolantSchedule;
    use alloc::sync::Arc;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn std_pair(reward: Reward, mode: LookAhead) -> TimeDependentReward {
        let path = MixturePath::new(
            GaussianMixture::standard(1).unwrap(),
            GaussianMixture::standard(1).unwrap(),
            InterpolantSchedule::linear(),
        )
        .unwrap();
        TimeDependentReward::new(reward, mode, FlowMapEvaluator::new(Arc::new(path), Tolerances::default()).unwrap())
            .unwrap()
    }

    #[test]
    fn ess_examples() {
        assert_relative_eq!(ess(&[0.0; 4]).unwrap(), 4.0, epsilon = 1e-14);
        let ninf = f64::NEG_INFINITY;
        assert_relative_eq!(ess(&[0.0, ninf, ninf, ninf]).unwrap(), 1.0, epsilon = 1e-14);
        let l2 = 2f64.ln();
        assert_relative_eq!(ess(&[l2, l2, 0.0, 0.0]).unwrap(), 3.6, epsilon = 1e-14);
        assert_eq!(ess(&[ninf; 3]).unwrap_err(), Error::DegenerateEnsemble);
        assert_eq!(ess(&[0.0, f64::NAN]).unwrap_err(), Error::NonFinite);
    }

    #[test]
    fn ess_shift_invariant() {
        let a = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = a.iter().map(|v| v + 700.0).collect();
        assert_relative_eq!(ess(&a).unwrap(), ess(&shifted).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn resampling_examples() {
        let mut rng = substream(3, 0, 0);
        let concentrated = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for scheme in [Resampler::Systematic, Resampler::Multinomial] {
            assert_eq!(resample_indices(&concentrated, 5, scheme, &mut rng).unwrap(), vec![0; 5]);
        }
        let idx = resample_indices(&[0.0; 8], 8, Resampler::Systematic, &mut rng).unwrap();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
        let logw = [0.1, -0.4, 1.3, 0.0, -2.0];
        let a = resample_indices(&logw, 50, Resampler::Multinomial, &mut substream(9, 1, 2)).unwrap();
        let b = resample_indices(&logw, 50, Resampler::Multinomial, &mut substream(9, 1, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn systematic_counts_are_within_one_of_expectation() {
        let logw = [0.5, -1.0, 2.0, 0.0, 0.7, -3.0];
        let p = softmax(&logw).unwrap();
        let n = 97;
        let idx = resample_indices(&logw, n, Resampler::Systematic, &mut substream(4, 0, 0)).unwrap();
        for (i, pi) in p.iter().enumerate() {
            let count = idx.iter().filter(|&&j| j == i).count() as f64;
            assert!((count - pi * n as f64).abs() < 1.0 + 1e-12);
        }
    }

    #[test]
    fn top_n_examples() {
        assert_eq!(select_top_n(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(select_top_n(&[1.0; 5], 3), vec![0, 1, 2]);
        assert_eq!(select_top_n(&[0.5, f64::NAN, 0.7], 2), vec![2, 0]);
    }

    #[test]
    fn single_survivor_fills_every_slot() {
        let rt = std_pair(Reward::linear_uniform(1.0, 1), LookAhead::Naive);
        let ensemble = ParticleEnsemble {
            positions: vec![dvector![0.2], dvector![1.5], dvector![-0.3], dvector![0.9]],
            log_weights: vec![0.0; 4],
            clones: 4,
            generation: 3,
        };
        let out = top_n_select(&ensemble, &rt, 0.5, 1).unwrap();
        assert!(out.positions.iter().all(|x| x[0] == 1.5));
    }

    #[test]
    fn weighted_expectation_examples() {
        let pos = vec![dvector![0.0], dvector![2.0]];
        assert_relative_eq!(weighted_expectation(&pos, &[0.0, 0.0], |x| x[0]).unwrap(), 1.0);
        let pos = vec![dvector![1.0], dvector![0.0]];
        let e = core::f64::consts::E;
        assert_relative_eq!(weighted_expectation(&pos, &[1.0, 0.0], |x| x[0]).unwrap(), e / (e + 1.0), epsilon = 1e-15);
        assert_eq!(weighted_expectation(&pos, &[1.0, 0.0], |_| 1.0).unwrap(), 1.0);
    }

    #[test]
    fn normalization_examples() {
        assert_relative_eq!(log_z_from_factors(&[], &[0.0, 0.0]).unwrap().exp(), 1.0);
        let l2 = 2f64.ln();
        assert_relative_eq!(log_z_from_factors(&[], &[l2, l2]).unwrap().exp(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(log_z_from_factors(&[1.5f64.ln()], &[l2, l2]).unwrap().exp(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn config_validation() {
        let rt = std_pair(Reward::Zero, LookAhead::FlowMap);
        let mut cfg = RunConfig::new(4, 10, 0);
        cfg.validate(&rt).unwrap();
        cfg.resampling = Resampling::Every(3);
        assert!(cfg.validate(&rt).is_err());
        cfg.resampling = Resampling::EssBelow(1.5);
        assert!(cfg.validate(&rt).is_err());
        cfg.resampling = Resampling::default();
        cfg.chi = DriftMultiplier::LocalTilt;
        assert!(matches!(cfg.validate(&rt), Err(Error::Incompatible(_))));
        cfg.mode = Mode::Searching;
        assert!(matches!(cfg.validate(&rt), Err(Error::Incompatible(_))));
        cfg.resampling = Resampling::Every(5);
        cfg.validate(&rt).unwrap();
        cfg.schedule = vec![0.0, 0.5, 0.5, 1.0];
        assert!(cfg.validate(&rt).is_err());
    }

    #[test]
    fn zero_reward_keeps_uniform_weights() {
        let rt = std_pair(Reward::Zero, LookAhead::FlowMap);
        let cfg = RunConfig::new(32, 20, 5);
        let out = run(&cfg, &rt).unwrap();
        assert!(out.events.is_empty());
        assert!(out.steps.iter().all(|s| s.ess == 32.0 && s.log_z == Some(0.0)));
        assert_eq!(out.increments.len(), 20);
        assert_eq!(out.steps.len(), 21);
    }

    #[test]
    fn runs_are_deterministic() {
        let rt = std_pair(Reward::linear_uniform(0.5, 1), LookAhead::FlowMap);
        let mut cfg = RunConfig::new(16, 10, 11);
        cfg.resampling = Resampling::Every(5);
        let a = run(&cfg, &rt).unwrap();
        let b = run(&cfg, &rt).unwrap();
        assert_eq!(a.ensemble, b.ensemble);
        assert_eq!(a.events, b.events);
        assert_eq!(a.events.len(), 1);
        assert_eq!(a.events[0].step, 5);
    }

    #[test]
    fn one_clone_search_without_selection_is_plain_run() {
        let rt = std_pair(Reward::linear_uniform(0.5, 1), LookAhead::FlowMap);
        let mut cfg = RunConfig::new(8, 10, 2);
        cfg.resampling = Resampling::Never;
        let plain = run(&cfg, &rt).unwrap();
        cfg.mode = Mode::Searching;
        let search = run(&cfg, &rt).unwrap();
        assert_eq!(plain.ensemble.positions, search.ensemble.positions);
        assert_eq!(z_smc(&search, 10).unwrap_err(), Error::Undefined("normalization estimate after greedy selection"));
    }

    #[test]
    fn normalization_history_tracks_events() {
        let rt = std_pair(Reward::linear_uniform(0.5, 1), LookAhead::FlowMap);
        let mut cfg = RunConfig::new(16, 12, 4);
        cfg.resampling = Resampling::Every(4);
        let out = run(&cfg, &rt).unwrap();
        let factors: Vec<f64> = out.events.iter().map(|e| e.log_mean_weight).collect();
        assert_eq!(factors.len(), 2);
        let expected = log_z_from_factors(&factors, &out.ensemble.log_weights).unwrap();
        assert_relative_eq!(out.log_z(12).unwrap(), expected, epsilon = 1e-12);
        // Increments rebuild the final weights from the last reset.
        let mut a = vec![0.0; 16];
        for log in &out.increments[8..] {
            for (v, g) in a.iter_mut().zip(&log.log_increments) {
                *v += g;
            }
        }
        for (x, y) in a.iter().zip(&out.ensemble.log_weights) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }
}
