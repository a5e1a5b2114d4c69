//! Terminal rewards `r(x)` and look-ahead rewards `r_t(x) = t r(xhat_t(x))`.

use alloc::format;
use alloc::sync::Arc;
use core::fmt::Debug;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::flowmap::{FlowMapEvaluator, StepScheme};
use crate::mixture::GaussianMixture;
use crate::path::MixturePath;
use crate::State;

/// A user-supplied differentiable scalar field.
pub trait RewardField: Send + Sync + Debug {
    fn value(&self, x: &State) -> f64;
    fn gradient(&self, x: &State) -> State;
}

#[derive(Debug, Clone)]
pub enum Reward {
    Zero,
    /// `lambda . x`
    Linear(State),
    /// `-gamma |x|^2 / 2`
    Quadratic { gamma: f64 },
    /// `scale * log p(component | x)` under `mixture`.
    LogResponsibility { mixture: Arc<GaussianMixture>, component: usize, scale: f64 },
    /// `inner(x) + offset`
    Shifted { inner: Arc<Reward>, offset: f64 },
    Custom(Arc<dyn RewardField>),
}

impl Reward {
    /// `lambda * sum_i x_i` in `dim` dimensions.
    pub fn linear_uniform(lambda: f64, dim: usize) -> Self {
        Reward::Linear(DVector::from_element(dim, lambda))
    }

    pub fn shifted(self, offset: f64) -> Self {
        Reward::Shifted { inner: Arc::new(self), offset }
    }

    pub fn value(&self, x: &State) -> Result<f64> {
        Ok(match self {
            Reward::Zero => 0.0,
            Reward::Linear(l) => {
                check_dim(l.len(), x)?;
                l.dot(x)
            }
            Reward::Quadratic { gamma } => -0.5 * gamma * x.norm_squared(),
            Reward::LogResponsibility { mixture, component, scale } => {
                let logs = mixture.log_responsibilities(x)?;
                scale * *logs
                    .get(*component)
                    .ok_or_else(|| invalid(format!("component {component} out of range")))?
            }
            Reward::Shifted { inner, offset } => inner.value(x)? + offset,
            Reward::Custom(f) => f.value(x),
        })
    }

    pub fn gradient(&self, x: &State) -> Result<State> {
        Ok(self.value_and_gradient(x)?.1)
    }

    pub fn value_and_gradient(&self, x: &State) -> Result<(f64, State)> {
        Ok(match self {
            Reward::Zero => (0.0, DVector::zeros(x.len())),
            Reward::Linear(l) => {
                check_dim(l.len(), x)?;
                (l.dot(x), l.clone())
            }
            Reward::Quadratic { gamma } => (-0.5 * gamma * x.norm_squared(), x * -*gamma),
            Reward::LogResponsibility { mixture, component, scale } => {
                let (v, g) = mixture.log_responsibility_with_gradient(x, *component)?;
                (scale * v, g * *scale)
            }
            Reward::Shifted { inner, offset } => {
                let (v, g) = inner.value_and_gradient(x)?;
                (v + offset, g)
            }
            Reward::Custom(f) => (f.value(x), f.gradient(x)),
        })
    }
}

fn check_dim(expected: usize, x: &State) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Dimension { expected, got: x.len() });
    }
    Ok(())
}

/// Which endpoint prediction the look-ahead reward composes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LookAhead {
    /// `xhat = x`
    Naive,
    /// `xhat = D_t(x)`
    Denoiser,
    /// `xhat = X_{t,1}(x)` from the integrated flow.
    #[default]
    FlowMap,
    /// `xhat` from a fixed-step map with `steps` steps.
    FlowMapSteps { steps: usize, scheme: StepScheme },
}

/// `r_t`, `r(xhat)` and `grad r_t` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LookAheadValue {
    pub predicted: State,
    /// `r(xhat)`
    pub terminal: f64,
    /// `t r(xhat)`
    pub value: f64,
    pub gradient: State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbeKind {
    #[default]
    Gaussian,
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HutchinsonConfig {
    pub probes: usize,
    pub radius: f64,
    pub kind: ProbeKind,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        Self { probes: 64, radius: 1e-3, kind: ProbeKind::Gaussian }
    }
}

impl HutchinsonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 || !(self.radius > 0.0) {
            return Err(invalid("Hutchinson estimator needs probes >= 1 and radius > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TimeDependentReward {
    reward: Reward,
    mode: LookAhead,
    flow: FlowMapEvaluator,
}

impl TimeDependentReward {
    pub fn new(reward: Reward, mode: LookAhead, flow: FlowMapEvaluator) -> Result<Self> {
        if let LookAhead::FlowMapSteps { steps: 0, .. } = mode {
            return Err(invalid("few-step look-ahead needs at least one step"));
        }
        Ok(Self { reward, mode, flow })
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    pub fn mode(&self) -> LookAhead {
        self.mode
    }

    pub fn flow(&self) -> &FlowMapEvaluator {
        &self.flow
    }

    pub fn path(&self) -> &MixturePath {
        self.flow.path()
    }

    pub fn with_reward(&self, reward: Reward) -> Self {
        Self { reward, ..self.clone() }
    }

    pub fn with_mode(&self, mode: LookAhead) -> Result<Self> {
        Self::new(self.reward.clone(), mode, self.flow.clone())
    }

    /// True when `xhat` is the exact flow-map endpoint `X_{t,1}(x)`.
    pub fn is_exact_flow_map(&self) -> bool {
        self.mode == LookAhead::FlowMap
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid("look-ahead time must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Endpoint prediction `xhat_t(x)`.
    pub fn predict(&self, t: f64, x: &State) -> Result<State> {
        Self::check_time(t)?;
        if t == 1.0 {
            return Ok(x.clone());
        }
        match self.mode {
            LookAhead::Naive => Ok(x.clone()),
            LookAhead::Denoiser => Ok(self.path().dynamics(t, x)?.denoiser),
            LookAhead::FlowMap => self.flow.flow_map(t, 1.0, x),
            LookAhead::FlowMapSteps { steps, scheme } => self.flow.k_step_map(t, 1.0, x, steps, scheme),
        }
    }

    /// `r_t(x)`.
    pub fn eval(&self, t: f64, x: &State) -> Result<f64> {
        if t == 0.0 {
            Self::check_time(t)?;
            return Ok(0.0);
        }
        Ok(t * self.reward.value(&self.predict(t, x)?)?)
    }

    /// `r(xhat_t(x))`, the reward at the predicted endpoint.
    pub fn terminal(&self, t: f64, x: &State) -> Result<f64> {
        self.reward.value(&self.predict(t, x)?)
    }

    /// `grad r_t(x) = t grad xhat^T grad r(xhat)`.
    pub fn grad(&self, t: f64, x: &State) -> Result<State> {
        Ok(self.evaluate(t, x)?.gradient)
    }

    pub fn evaluate(&self, t: f64, x: &State) -> Result<LookAheadValue> {
        Self::check_time(t)?;
        let mode = if t == 1.0 { LookAhead::Naive } else { self.mode };
        let (predicted, jacobian) = match mode {
            LookAhead::Naive => (x.clone(), None),
            LookAhead::Denoiser => {
                let (d, j) = self.path().denoiser_with_gradient(t, x)?;
                (d, Some(j))
            }
            LookAhead::FlowMap => {
                let r = self.flow.flow_map_jacobian(t, 1.0, x)?;
                (r.endpoint, Some(r.jacobian))
            }
            LookAhead::FlowMapSteps { steps, scheme } => {
                let r = self.flow.k_step_map_jacobian(t, 1.0, x, steps, scheme)?;
                (r.endpoint, Some(r.jacobian))
            }
        };
        let (terminal, g) = self.reward.value_and_gradient(&predicted)?;
        let gradient = match jacobian {
            Some(j) => j.tr_mul(&g) * t,
            None => g * t,
        };
        Ok(LookAheadValue { predicted, terminal, value: t * terminal, gradient })
    }

    /// Finite-difference `d/dt r_t(x)`: central inside `(0, 1)`, one-sided
    /// when `t +- h` leaves the unit interval.
    pub fn time_derivative(&self, t: f64, x: &State, h: f64) -> Result<f64> {
        Self::check_time(t)?;
        if !(h > 0.0) {
            return Err(invalid("finite-difference step must be positive"));
        }
        let up = t + h <= 1.0;
        let down = t - h >= 0.0;
        match (down, up) {
            (true, true) => Ok((self.eval(t + h, x)? - self.eval(t - h, x)?) / (2.0 * h)),
            (false, true) => Ok((self.eval(t + h, x)? - self.eval(t, x)?) / h),
            (true, false) => Ok((self.eval(t, x)? - self.eval(t - h, x)?) / h),
            (false, false) => Err(invalid("finite-difference step exceeds the unit interval")),
        }
    }

    /// Hutchinson estimate of `Laplacian r_t(x)`.
    pub fn hutchinson_laplacian<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: &State,
        cfg: &HutchinsonConfig,
        rng: &mut R,
    ) -> Result<f64> {
        Ok(hutchinson(|y| self.grad(t, y), x, cfg, rng)?.value)
    }
}

/// Probe-averaged Laplacian estimate and the standard error across probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianEstimate {
    pub value: f64,
    /// Infinite for a single probe.
    pub stderr: f64,
}

/// Hutchinson estimate `mean_m z_m . (g(x + h z_m) - g(x - h z_m)) / 2h`
/// of the Laplacian of the field whose gradient is `grad`.
pub fn hutchinson<F, R>(mut grad: F, x: &State, cfg: &HutchinsonConfig, rng: &mut R) -> Result<LaplacianEstimate>
where
    F: FnMut(&State) -> Result<State>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let d = x.len();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..cfg.probes {
        let z = match cfg.kind {
            ProbeKind::Gaussian => DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)),
            ProbeKind::Rademacher => DVector::from_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
        };
        let plus = grad(&(x + &z * cfg.radius))?;
        let minus = grad(&(x - &z * cfg.radius))?;
        let sample = z.dot(&(plus - minus)) / (2.0 * cfg.radius);
        sum += sample;
        sum_sq += sample * sample;
    }
    let m = cfg.probes as f64;
    let value = sum / m;
    let stderr = if cfg.probes > 1 {
        ((sum_sq - m * value * value).max(0.0) / (m - 1.0) / m).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(LaplacianEstimate { value, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::Tolerances;
    use crate::rng::substream;
    use crate::schedule::InterpolantSchedule;
    use alloc::vec;
    use approx::assert_relative_eq;
    use nalgebra::{dvector, DMatrix};

    fn std_flow() -> FlowMapEvaluator {
        let path = MixturePath::new(
            GaussianMixture::standard(1).unwrap(),
            GaussianMixture::standard(1).unwrap(),
            InterpolantSchedule::linear(),
        )
        .unwrap();
        FlowMapEvaluator::new(Arc::new(path), Tolerances::new(1e-11, 1e-13)).unwrap()
    }

    fn identity_reward(mode: LookAhead) -> TimeDependentReward {
        TimeDependentReward::new(Reward::linear_uniform(1.0, 1), mode, std_flow()).unwrap()
    }

    #[test]
    fn look_ahead_values() {
        let x = dvector![2.0];
        assert_relative_eq!(identity_reward(LookAhead::Naive).eval(0.25, &x).unwrap(), 0.5);
        assert_relative_eq!(identity_reward(LookAhead::Denoiser).eval(0.25, &x).unwrap(), 0.2, epsilon = 1e-12);
        assert_relative_eq!(
            identity_reward(LookAhead::FlowMap).eval(0.25, &x).unwrap(),
            0.25 * 2.0 * (1.0f64 / 0.625).sqrt(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn look_ahead_gradients() {
        let naive = TimeDependentReward::new(Reward::linear_uniform(0.5, 1), LookAhead::Naive, std_flow()).unwrap();
        assert_relative_eq!(naive.grad(0.5, &dvector![3.0]).unwrap()[0], 0.25);
        let fm = identity_reward(LookAhead::FlowMap);
        assert_eq!(fm.grad(0.0, &dvector![7.0]).unwrap()[0], 0.0);
        assert_relative_eq!(fm.grad(0.25, &dvector![2.0]).unwrap()[0], 0.25 * (1.0f64 / 0.625).sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn boundary_times() {
        let x = dvector![1.7];
        for mode in [
            LookAhead::Naive,
            LookAhead::Denoiser,
            LookAhead::FlowMap,
            LookAhead::FlowMapSteps { steps: 4, scheme: StepScheme::Heun },
        ] {
            let rt = identity_reward(mode);
            assert_eq!(rt.eval(0.0, &x).unwrap(), 0.0);
            assert_relative_eq!(rt.eval(1.0, &x).unwrap(), 1.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn time_derivative_of_naive_reward() {
        let rt = identity_reward(LookAhead::Naive);
        for t in [0.0, 0.3, 1.0] {
            assert_relative_eq!(rt.time_derivative(t, &dvector![2.0], 1e-4).unwrap(), 2.0, epsilon = 1e-8);
        }
        let zero = rt.with_reward(Reward::Zero);
        assert_eq!(zero.time_derivative(0.5, &dvector![2.0], 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn reward_gradients_match_differences() {
        let mix = Arc::new(
            GaussianMixture::new(
                vec![0.5, 0.5],
                vec![dvector![-2.0, 0.0], dvector![2.0, 0.0]],
                vec![DMatrix::identity(2, 2) * 0.25; 2],
            )
            .unwrap(),
        );
        let rewards = [
            Reward::linear_uniform(0.3, 2),
            Reward::Quadratic { gamma: 1.5 },
            Reward::LogResponsibility { mixture: mix, component: 1, scale: 0.1 },
            Reward::Quadratic { gamma: 0.5 }.shifted(3.0),
        ];
        let x = dvector![0.2, -0.7];
        let h = 1e-5;
        for r in &rewards {
            let g = r.gradient(&x).unwrap();
            for i in 0..2 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (r.value(&xp).unwrap() - r.value(&xm).unwrap()) / (2.0 * h);
                assert_relative_eq!(g[i], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn hutchinson_quadratic_and_linear() {
        let path = MixturePath::new(
            GaussianMixture::standard(2).unwrap(),
            GaussianMixture::standard(2).unwrap(),
            InterpolantSchedule::linear(),
        )
        .unwrap();
        let flow = FlowMapEvaluator::new(Arc::new(path), Tolerances::default()).unwrap();
        let quad = TimeDependentReward::new(Reward::Quadratic { gamma: 1.0 }, LookAhead::Naive, flow.clone()).unwrap();
        let cfg = HutchinsonConfig { probes: 1000, ..HutchinsonConfig::default() };
        let est = quad.hutchinson_laplacian(1.0, &dvector![0.3, 0.1], &cfg, &mut substream(3, 0, 0)).unwrap();
        assert!((est + 2.0).abs() < 0.2, "{est}");
        let lin = quad.with_reward(Reward::linear_uniform(0.7, 2));
        let est = lin.hutchinson_laplacian(1.0, &dvector![0.3, 0.1], &cfg, &mut substream(3, 0, 0)).unwrap();
        assert!(est.abs() < 1e-9);
        let bad = HutchinsonConfig { probes: 0, ..cfg };
        assert!(quad.hutchinson_laplacian(1.0, &dvector![0.0, 0.0], &bad, &mut substream(3, 0, 0)).is_err());
    }

    #[test]
    fn rademacher_probe_is_exact_in_one_dimension() {
        let rt = TimeDependentReward::new(Reward::Quadratic { gamma: 2.0 }, LookAhead::Naive, std_flow()).unwrap();
        let cfg = HutchinsonConfig { probes: 1, radius: 1e-3, kind: ProbeKind::Rademacher };
        let est = rt.hutchinson_laplacian(0.5, &dvector![0.4], &cfg, &mut substream(0, 0, 0)).unwrap();
        assert_relative_eq!(est, -1.0, epsilon = 1e-9);
    }
}
