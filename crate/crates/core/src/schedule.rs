//! Interpolant coefficients `alpha_t`, `beta_t`, the diffusion level `epsilon_t`
//! and the tilted-score multiplier `eta_t`.

use core::f64::consts::FRAC_PI_2;
#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use crate::error::{invalid, Error, Result};

/// Shape of the interpolant `I_t = alpha_t x_0 + beta_t x_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterpolantKind {
    /// `alpha_t = 1 - t`, `beta_t = t`.
    #[default]
    Linear,
    /// `alpha_t = cos(pi t / 2)`, `beta_t = sin(pi t / 2)`.
    Trigonometric,
}

/// Diffusion coefficient `epsilon_t` of the position SDE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusion {
    Zero,
    Constant(f64),
    /// `scale * (1 - t)`.
    Decaying(f64),
}

impl Default for Diffusion {
    fn default() -> Self {
        Diffusion::Decaying(1.0)
    }
}

impl Diffusion {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Diffusion::Zero => 0.0,
            Diffusion::Constant(c) => c,
            Diffusion::Decaying(scale) => scale * (1.0 - t),
        }
    }
}

/// Interpolant coefficients at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
}

/// All schedule scalars at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
    pub epsilon: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolantSchedule {
    pub kind: InterpolantKind,
    pub diffusion: Diffusion,
    /// Added to `beta_t` in the denominator of `eta_t`.
    pub eta_offset: f64,
}

impl Default for InterpolantSchedule {
    fn default() -> Self {
        Self::linear()
    }
}

impl InterpolantSchedule {
    /// Linear interpolant with `epsilon_t = 1 - t` and no offset.
    pub fn linear() -> Self {
        Self {
            kind: InterpolantKind::Linear,
            diffusion: Diffusion::default(),
            eta_offset: 0.0,
        }
    }

    pub fn with_diffusion(mut self, diffusion: Diffusion) -> Self {
        self.diffusion = diffusion;
        self
    }

    pub fn with_eta_offset(mut self, offset: f64) -> Self {
        self.eta_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_offset >= 0.0 && self.eta_offset.is_finite()) {
            return Err(invalid("eta offset must be finite and non-negative"));
        }
        match self.diffusion {
            Diffusion::Zero => {}
            Diffusion::Constant(c) | Diffusion::Decaying(c) => {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(invalid("diffusion scale must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Interpolant coefficients. Defined for every real `t`; callers restrict
    /// to `[0, 1]` where it matters.
    #[inline]
    pub fn coefficients(&self, t: f64) -> Coefficients {
        match self.kind {
            InterpolantKind::Linear => Coefficients {
                alpha: 1.0 - t,
                beta: t,
                alpha_dot: -1.0,
                beta_dot: 1.0,
            },
            InterpolantKind::Trigonometric => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                Coefficients {
                    alpha: c,
                    beta: s,
                    alpha_dot: -FRAC_PI_2 * s,
                    beta_dot: FRAC_PI_2 * c,
                }
            }
        }
    }

    #[inline]
    pub fn epsilon(&self, t: f64) -> f64 {
        self.diffusion.at(t)
    }

    /// `eta_t = alpha_t (beta_dot_t / (beta_t + offset) alpha_t - alpha_dot_t)`.
    pub fn eta(&self, t: f64) -> Result<f64> {
        let c = self.coefficients(t);
        if c.alpha == 0.0 {
            return Ok(0.0);
        }
        let denom = c.beta + self.eta_offset;
        if denom == 0.0 {
            return Err(Error::ScheduleDomain { what: "eta", t });
        }
        let eta = c.alpha * (c.beta_dot / denom * c.alpha - c.alpha_dot);
        if !eta.is_finite() {
            return Err(Error::ScheduleDomain { what: "eta", t });
        }
        Ok(eta)
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid("schedule time must lie in [0, 1]"));
        }
        let c = self.coefficients(t);
        Ok(ScheduleValues {
            alpha: c.alpha,
            beta: c.beta,
            alpha_dot: c.alpha_dot,
            beta_dot: c.beta_dot,
            epsilon: self.epsilon(t),
            eta: self.eta(t)?,
        })
    }
}
