//! Euler–Maruyama steps of the reward-tilted position SDE and the matching
//! log-weight updates.
//!
//! The position update is
//! `x' = x + dt [b + chi grad r_t + eps (s + grad r_t)] + sqrt(2 eps dt) xi`
//! and every weight scheme below discretizes the same continuous log-weight
//! dynamics for that SDE.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mixture::log_sum_exp;
use crate::reward::{HutchinsonConfig, LookAheadValue, TimeDependentReward};
use crate::rng::standard_normal;
use crate::schedule::InterpolantSchedule;
use crate::State;

/// Step used for the finite-difference `d/dt r_t` in the generic drift term.
pub const TIME_FD_STEP: f64 = 1e-4;

/// Coefficient `chi_t` of the extra `grad r_t` drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftMultiplier {
    /// `chi = 0`
    #[default]
    Default,
    /// `chi = eta_t`
    TiltedScore,
    /// `chi = eps_t`
    LocalTilt,
    /// `chi = -eps_t`; positions ignore the reward entirely.
    Base,
}

impl DriftMultiplier {
    pub fn value(&self, schedule: &InterpolantSchedule, t: f64) -> Result<f64> {
        Ok(match self {
            DriftMultiplier::Default => 0.0,
            DriftMultiplier::TiltedScore => schedule.eta(t)?,
            DriftMultiplier::LocalTilt => schedule.epsilon(t),
            DriftMultiplier::Base => -schedule.epsilon(t),
        })
    }
}

/// Log-weight discretization.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WeightScheme {
    /// `A' = A + dt r(X_{t,1}(x))`; exact flow-map look-ahead with `chi = 0` only.
    #[default]
    Simplified,
    /// Drift form with a Hutchinson Laplacian estimate.
    Laplacian(HutchinsonConfig),
    /// Drift form with the forward/backward Itô correction on the shared noise.
    Ito,
    /// Inner Monte Carlo average of `exp(r_{t'}(y) - r_t(x))`.
    /// `paper_literal` adds the average itself instead of its logarithm.
    Expectation { samples: usize, paper_literal: bool },
}

impl WeightScheme {
    /// Rejects scheme/multiplier/look-ahead combinations that would bias the weights.
    pub fn check(&self, chi: DriftMultiplier, rt: &TimeDependentReward) -> Result<()> {
        match self {
            WeightScheme::Simplified => {
                if chi != DriftMultiplier::Default {
                    return Err(Error::Incompatible("simplified weights require chi = default".into()));
                }
                if !rt.is_exact_flow_map() {
                    return Err(Error::Incompatible(
                        "simplified weights require the exact flow-map look-ahead".into(),
                    ));
                }
            }
            WeightScheme::Laplacian(cfg) => cfg.validate()?,
            WeightScheme::Ito => {}
            WeightScheme::Expectation { samples, .. } => {
                if *samples == 0 {
                    return Err(invalid("expectation scheme needs at least one inner sample"));
                }
            }
        }
        Ok(())
    }
}

/// One particle's position, log-weight, step times and supplied noise.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub x: &'a State,
    pub log_weight: f64,
    pub t: f64,
    pub t_next: f64,
    pub noise: &'a State,
}

impl StepInput<'_> {
    fn validate(&self) -> Result<f64> {
        if !(self.t < self.t_next) {
            return Err(invalid("step requires t < t_next"));
        }
        if self.noise.len() != self.x.len() {
            return Err(Error::Dimension { expected: self.x.len(), got: self.noise.len() });
        }
        Ok(self.t_next - self.t)
    }
}

/// Dynamics, look-ahead reward and schedule scalars at one `(t, x)`.
#[derive(Debug, Clone)]
pub struct LocalState {
    pub t: f64,
    pub x: State,
    pub velocity: State,
    pub score: State,
    pub look: LookAheadValue,
    pub epsilon: f64,
    pub chi: f64,
    has_gradient: bool,
}

impl LocalState {
    pub fn compute(rt: &TimeDependentReward, chi: DriftMultiplier, t: f64, x: &State) -> Result<Self> {
        let path = rt.path();
        let dynamics = path.dynamics(t, x)?;
        let epsilon = path.schedule().epsilon(t);
        let chi = chi.value(path.schedule(), t)?;
        // The reward gradient is skipped only when nothing downstream reads it.
        let has_gradient = chi != 0.0 || epsilon != 0.0 || !rt.is_exact_flow_map();
        let look = if has_gradient {
            rt.evaluate(t, x)?
        } else {
            let predicted = rt.predict(t, x)?;
            let terminal = rt.reward().value(&predicted)?;
            LookAheadValue { predicted, terminal, value: t * terminal, gradient: State::zeros(x.len()) }
        };
        Ok(Self {
            t,
            x: x.clone(),
            velocity: dynamics.velocity,
            score: dynamics.score,
            look,
            epsilon,
            chi,
            has_gradient,
        })
    }

    /// Euler–Maruyama update with the supplied standard-normal `noise`.
    pub fn advance(&self, dt: f64, noise: &State) -> Result<State> {
        let grad = &self.look.gradient;
        // Grouping chi + eps makes the base multiplier cancel the reward term exactly.
        let drift = &self.velocity + &self.score * self.epsilon + grad * (self.chi + self.epsilon);
        if drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::ScheduleDomain { what: "tilted drift", t: self.t });
        }
        let next = &self.x + drift * dt + noise * (2.0 * self.epsilon * dt).sqrt();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(next)
    }

    /// `b . grad r_t + d/dt r_t`, or `r(X_{t,1}(x))` for the exact flow-map look-ahead.
    fn transport_term(&self, rt: &TimeDependentReward) -> Result<f64> {
        if rt.is_exact_flow_map() {
            return Ok(self.look.terminal);
        }
        debug_assert!(self.has_gradient);
        Ok(self.velocity.dot(&self.look.gradient) + rt.time_derivative(self.t, &self.x, TIME_FD_STEP)?)
    }

    fn tilt_bracket(&self) -> f64 {
        let g = &self.look.gradient;
        g.norm_squared() + g.dot(&self.score)
    }
}

/// `chi sqrt(dt / (2 eps))`, zero whenever `chi` is.
fn ito_coefficient(chi: f64, epsilon: f64, dt: f64, t: f64) -> Result<f64> {
    if chi == 0.0 {
        return Ok(0.0);
    }
    if !(epsilon > 0.0) {
        return Err(Error::Incompatible(alloc::format!(
            "Itô weights need eps > 0 where chi != 0 (t = {t})"
        )));
    }
    Ok(chi * (dt / (2.0 * epsilon)).sqrt())
}

pub fn increment_simplified(local: &LocalState, dt: f64) -> f64 {
    dt * local.look.terminal
}

pub fn increment_laplacian<R: Rng + ?Sized>(
    local: &LocalState,
    rt: &TimeDependentReward,
    dt: f64,
    cfg: &HutchinsonConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut rate = local.transport_term(rt)?;
    if local.chi != 0.0 {
        let laplacian = rt.hutchinson_laplacian(local.t, &local.x, cfg, rng)?;
        rate += local.chi * (local.tilt_bracket() + laplacian);
    }
    Ok(dt * rate)
}

/// The forward-integral gradient is taken at the post-step state `next.x`.
pub fn increment_ito(
    local: &LocalState,
    next: &LocalState,
    rt: &TimeDependentReward,
    dt: f64,
    noise: &State,
) -> Result<f64> {
    let mut rate = local.transport_term(rt)?;
    if local.chi != 0.0 {
        rate += local.chi * local.tilt_bracket();
    }
    let forward = ito_coefficient(next.chi, next.epsilon, dt, next.t)?;
    let backward = ito_coefficient(local.chi, local.epsilon, dt, local.t)?;
    let mut inc = dt * rate;
    if forward != 0.0 {
        inc += forward * next.look.gradient.dot(noise);
    }
    if backward != 0.0 {
        inc -= backward * local.look.gradient.dot(noise);
    }
    Ok(inc)
}

pub fn increment_expectation<R: Rng + ?Sized>(
    local: &LocalState,
    rt: &TimeDependentReward,
    t_next: f64,
    samples: usize,
    paper_literal: bool,
    rng: &mut R,
) -> Result<f64> {
    let dt = t_next - local.t;
    let r_now = local.look.value;
    let deterministic = || -> Result<f64> {
        let y = &local.x + &local.velocity * dt;
        Ok(rt.eval(t_next, &y)? - r_now)
    };
    if local.chi == 0.0 {
        return deterministic();
    }
    let strength = local.chi.abs();
    let centre = &local.x + (&local.velocity + &local.score * strength) * dt;
    let spread = (2.0 * strength * dt).sqrt();
    let d = local.x.len();
    let mut deltas = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = &centre + standard_normal(rng, d) * spread;
        deltas.push(rt.eval(t_next, &y)? - r_now);
    }
    let averaged = if paper_literal {
        deltas.iter().map(|v| v.exp()).sum::<f64>() / samples as f64
    } else {
        log_sum_exp(&deltas) - (samples as f64).ln()
    };
    if local.chi > 0.0 {
        Ok(averaged)
    } else {
        Ok(2.0 * deterministic()? - averaged)
    }
}

/// Position update for one particle.
pub fn position_step(input: &StepInput<'_>, chi: DriftMultiplier, rt: &TimeDependentReward) -> Result<State> {
    let dt = input.validate()?;
    LocalState::compute(rt, chi, input.t, input.x)?.advance(dt, input.noise)
}

/// `A' = A + dt r(X_{t,1}(x))`.
pub fn weight_step_simplified(input: &StepInput<'_>, rt: &TimeDependentReward) -> Result<f64> {
    let dt = input.validate()?;
    WeightScheme::Simplified.check(DriftMultiplier::Default, rt)?;
    Ok(input.log_weight + dt * rt.terminal(input.t, input.x)?)
}

pub fn weight_step_laplacian<R: Rng + ?Sized>(
    input: &StepInput<'_>,
    chi: DriftMultiplier,
    rt: &TimeDependentReward,
    cfg: &HutchinsonConfig,
    rng: &mut R,
) -> Result<f64> {
    let dt = input.validate()?;
    let local = LocalState::compute(rt, chi, input.t, input.x)?;
    Ok(input.log_weight + increment_laplacian(&local, rt, dt, cfg, rng)?)
}

/// `x_next` must be the position produced from `input` with the same noise.
pub fn weight_step_ito(
    input: &StepInput<'_>,
    x_next: &State,
    chi: DriftMultiplier,
    rt: &TimeDependentReward,
) -> Result<f64> {
    let dt = input.validate()?;
    let local = LocalState::compute(rt, chi, input.t, input.x)?;
    let next = LocalState::compute(rt, chi, input.t_next, x_next)?;
    Ok(input.log_weight + increment_ito(&local, &next, rt, dt, input.noise)?)
}

pub fn weight_step_expectation<R: Rng + ?Sized>(
    input: &StepInput<'_>,
    chi: DriftMultiplier,
    rt: &TimeDependentReward,
    samples: usize,
    paper_literal: bool,
    rng: &mut R,
) -> Result<f64> {
    input.validate()?;
    if samples == 0 {
        return Err(invalid("expectation scheme needs at least one inner sample"));
    }
    let local = LocalState::compute(rt, chi, input.t, input.x)?;
    Ok(input.log_weight + increment_expectation(&local, rt, input.t_next, samples, paper_literal, rng)?)
}

/// States visited from `x0` over `times` when step `k` uses `noises[k]`.
pub fn simulate_path(
    rt: &TimeDependentReward,
    chi: DriftMultiplier,
    times: &[f64],
    x0: &State,
    noises: &[State],
) -> Result<Vec<LocalState>> {
    if times.len() != noises.len() + 1 {
        return Err(Error::Dimension { expected: times.len().saturating_sub(1), got: noises.len() });
    }
    let mut states = Vec::with_capacity(times.len());
    states.push(LocalState::compute(rt, chi, times[0], x0)?);
    for (w, noise) in times.windows(2).zip(noises) {
        if !(w[0] < w[1]) {
            return Err(invalid("times must be strictly increasing"));
        }
        let last = &states[states.len() - 1];
        let x = last.advance(w[1] - w[0], noise)?;
        states.push(LocalState::compute(rt, chi, w[1], &x)?);
    }
    Ok(states)
}

/// Log-weight accumulated by `scheme` along states from [`simulate_path`];
/// `noises` must be the ones that produced them.
pub fn log_weight_along<R: Rng + ?Sized>(
    rt: &TimeDependentReward,
    chi: DriftMultiplier,
    scheme: &WeightScheme,
    states: &[LocalState],
    noises: &[State],
    rng: &mut R,
) -> Result<f64> {
    scheme.check(chi, rt)?;
    if states.len() != noises.len() + 1 {
        return Err(Error::Dimension { expected: states.len().saturating_sub(1), got: noises.len() });
    }
    let mut total = 0.0;
    for (pair, noise) in states.windows(2).zip(noises) {
        let (now, next) = (&pair[0], &pair[1]);
        let dt = next.t - now.t;
        total += match scheme {
            WeightScheme::Simplified => increment_simplified(now, dt),
            WeightScheme::Laplacian(cfg) => increment_laplacian(now, rt, dt, cfg, rng)?,
            WeightScheme::Ito => increment_ito(now, next, rt, dt, noise)?,
            WeightScheme::Expectation { samples, paper_literal } => {
                increment_expectation(now, rt, next.t, *samples, *paper_literal, rng)?
            }
        };
    }
    Ok(total)
}
