//! Ground-truth generators: closed-form Gaussian tilts, self-normalized
//! importance sampling, quadrature and finite-difference gradients.

use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mixture::{log_sum_exp, GaussianMixture};
use crate::reward::Reward;
use crate::State;

/// Reward families with a closed-form Gaussian tilt.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianReward {
    /// `r(x) = lambda . x`
    Linear(State),
    /// `r(x) = -gamma |x|^2 / 2`
    Quadratic(f64),
}

impl GaussianReward {
    pub fn from_reward(reward: &Reward, dim: usize) -> Option<Self> {
        match reward {
            Reward::Zero => Some(GaussianReward::Linear(State::zeros(dim))),
            Reward::Linear(lambda) => Some(GaussianReward::Linear(lambda.clone())),
            Reward::Quadratic { gamma } => Some(GaussianReward::Quadratic(*gamma)),
            _ => None,
        }
    }
}

/// `N(mean, covariance)` reweighted by `exp(r)`, with `F = -log E[exp(r)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTilt {
    pub mean: State,
    pub covariance: DMatrix<f64>,
    pub log_normalizer: f64,
}

/// Completes the square for a Gaussian under a linear or quadratic reward.
pub fn gaussian_tilt(mean: &State, covariance: &DMatrix<f64>, reward: &GaussianReward) -> Result<GaussianTilt> {
    let d = mean.len();
    if covariance.shape() != (d, d) {
        return Err(Error::Dimension { expected: d, got: covariance.nrows() });
    }
    if covariance.clone().cholesky().is_none() {
        return Err(invalid("covariance must be positive-definite"));
    }
    match reward {
        GaussianReward::Linear(lambda) => {
            if lambda.len() != d {
                return Err(Error::Dimension { expected: d, got: lambda.len() });
            }
            let shift = covariance * lambda;
            Ok(GaussianTilt {
                mean: mean + &shift,
                covariance: covariance.clone(),
                log_normalizer: -lambda.dot(mean) - 0.5 * lambda.dot(&shift),
            })
        }
        GaussianReward::Quadratic(gamma) => {
            // Normalizable exactly when `I + gamma S` is positive-definite.
            let a = (DMatrix::identity(d, d) + covariance * *gamma).symmetric_part();
            let chol = a.cholesky().ok_or_else(|| invalid("quadratic tilt is not normalizable"))?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let a_inv = chol.inverse();
            let tilted_cov = (&a_inv * covariance).symmetric_part();
            let tilted_mean = &a_inv * mean;
            Ok(GaussianTilt {
                log_normalizer: 0.5 * log_det + 0.5 * gamma * mean.dot(&tilted_mean),
                mean: tilted_mean,
                covariance: tilted_cov,
            })
        }
    }
}

/// Scalar form: `(tilted mean, tilted variance, F)`.
pub fn gaussian_tilt_1d(mean: f64, variance: f64, reward: &GaussianReward) -> Result<(f64, f64, f64)> {
    if !(variance > 0.0) {
        return Err(invalid("variance must be positive"));
    }
    let out = gaussian_tilt(&State::from_element(1, mean), &DMatrix::from_element(1, 1, variance), reward)?;
    Ok((out.mean[0], out.covariance[(0, 0)], out.log_normalizer))
}

/// Target, reward and, when available, the closed-form log-normalizer.
#[derive(Debug, Clone)]
pub struct TiltedOracle {
    pub target: GaussianMixture,
    pub reward: Reward,
    pub log_normalizer: Option<f64>,
}

impl TiltedOracle {
    pub fn new(target: GaussianMixture, reward: Reward) -> Self {
        let log_normalizer = if target.len() == 1 {
            GaussianReward::from_reward(&reward, target.dim())
                .and_then(|g| gaussian_tilt(&target.means()[0], &target.covariances()[0], &g).ok())
                .map(|t| t.log_normalizer)
        } else {
            None
        };
        Self { target, reward, log_normalizer }
    }

    pub fn closed_form(&self) -> Option<GaussianTilt> {
        if self.target.len() != 1 {
            return None;
        }
        let g = GaussianReward::from_reward(&self.reward, self.target.dim())?;
        gaussian_tilt(&self.target.means()[0], &self.target.covariances()[0], &g).ok()
    }
}

/// Self-normalized estimate with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Minimum sample count accepted by [`snis_tilted_expectation`].
pub const MIN_SNIS_SAMPLES: usize = 100;

/// `E[h]` under `target` tilted by `exp(r)`, from `samples` i.i.d. draws of `target`.
pub fn snis_tilted_expectation<R, H>(
    target: &GaussianMixture,
    reward: &Reward,
    mut h: H,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate>
where
    R: Rng + ?Sized,
    H: FnMut(&State) -> f64,
{
    if samples < MIN_SNIS_SAMPLES {
        return Err(invalid(alloc::format!("SNIS needs at least {MIN_SNIS_SAMPLES} samples")));
    }
    let xs = target.sample(samples, rng)?;
    let mut log_w = Vec::with_capacity(samples);
    let mut values = Vec::with_capacity(samples);
    for x in &xs {
        let r = reward.value(x)?;
        let v = h(x);
        if !r.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite);
        }
        log_w.push(r);
        values.push(v);
    }
    let lse = log_sum_exp(&log_w);
    let w: Vec<f64> = log_w.iter().map(|a| (a - lse).exp()).collect();
    let estimate: f64 = w.iter().zip(&values).map(|(w, v)| w * v).sum();
    let var: f64 = w.iter().zip(&values).map(|(w, v)| w * w * (v - estimate).powi(2)).sum();
    Ok(Estimate { estimate, stderr: var.sqrt() })
}

/// Central differences per coordinate.
pub fn finite_diff_grad<F: FnMut(&State) -> f64>(mut f: F, x: &State, h: f64) -> Result<State> {
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let mut grad = State::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Composite Simpson rule for `log int rho_1(x) exp(r(x)) h(x) dx` style
/// integrals on a 1D mixture, over `mean +/- width` standard deviations of
/// every component. Returns `log int rho_1 e^r` and `int rho_1 e^r h / int rho_1 e^r`.
pub fn quadrature_1d<H: FnMut(f64) -> f64>(
    target: &GaussianMixture,
    reward: &Reward,
    mut h: H,
    width: f64,
    intervals: usize,
) -> Result<(f64, f64)> {
    if target.dim() != 1 {
        return Err(invalid("quadrature is one-dimensional"));
    }
    if intervals < 2 || intervals % 2 != 0 {
        return Err(invalid("Simpson's rule needs an even number of intervals"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (m, c) in target.means().iter().zip(target.covariances()) {
        let s = c[(0, 0)].sqrt();
        lo = lo.min(m[0] - width * s);
        hi = hi.max(m[0] + width * s);
    }
    let step = (hi - lo) / intervals as f64;
    let mut log_terms = Vec::with_capacity(intervals + 1);
    let mut hs = Vec::with_capacity(intervals + 1);
    for i in 0..=intervals {
        let x = lo + step * i as f64;
        let state = State::from_element(1, x);
        let coef: f64 = if i == 0 || i == intervals { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        log_terms.push(coef.ln() + target.log_density(&state)? + reward.value(&state)?);
        hs.push(h(x));
    }
    let lse = log_sum_exp(&log_terms);
    let mean = log_terms.iter().zip(&hs).map(|(l, v)| (l - lse).exp() * v).sum();
    Ok((lse + (step / 3.0).ln(), mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use alloc::vec;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn closed_form_examples() {
        let (m, v, f) = gaussian_tilt_1d(0.0, 1.0, &GaussianReward::Linear(dvector![0.5])).unwrap();
        assert_relative_eq!(m, 0.5, epsilon = 1e-15);
        assert_relative_eq!(v, 1.0, epsilon = 1e-15);
        assert_relative_eq!(f, -0.125, epsilon = 1e-15);
        let (m, v, f) = gaussian_tilt_1d(0.0, 1.0, &GaussianReward::Linear(dvector![0.0])).unwrap();
        assert_eq!((m, v, f), (0.0, 1.0, 0.0));
        let (m, v, f) = gaussian_tilt_1d(0.0, 1.0, &GaussianReward::Quadratic(1.0)).unwrap();
        assert_eq!(m, 0.0);
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);
        assert_relative_eq!(f, 0.5 * 2f64.ln(), epsilon = 1e-15);
        assert!(gaussian_tilt_1d(0.0, 1.0, &GaussianReward::Quadratic(-1.0)).is_err());
        assert!(gaussian_tilt_1d(0.0, 1.0, &GaussianReward::Quadratic(-2.0)).is_err());
        assert!(gaussian_tilt_1d(0.0, 0.0, &GaussianReward::Quadratic(1.0)).is_err());
    }

    #[test]
    fn closed_form_normalizer_matches_quadrature() {
        for (mean, var, reward) in [
            (0.7, 0.4, Reward::Linear(dvector![-1.3])),
            (-1.0, 2.0, Reward::Quadratic { gamma: 0.6 }),
            (2.0, 0.3, Reward::Quadratic { gamma: -1.5 }),
        ] {
            let target = GaussianMixture::isotropic(dvector![mean], var).unwrap();
            let oracle = TiltedOracle::new(target.clone(), reward.clone());
            let f = oracle.log_normalizer.unwrap();
            let (log_z, tilted_mean) = quadrature_1d(&target, &reward, |x| x, 14.0, 20_000).unwrap();
            assert!((f + log_z).abs() < 1e-8, "{f} {log_z}");
            assert_relative_eq!(oracle.closed_form().unwrap().mean[0], tilted_mean, epsilon = 1e-8);
        }
    }

    #[test]
    fn multivariate_tilt_matches_scalar_per_axis() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]);
        let out = gaussian_tilt(&dvector![1.0, -1.0], &cov, &GaussianReward::Quadratic(0.5)).unwrap();
        let a = gaussian_tilt_1d(1.0, 0.5, &GaussianReward::Quadratic(0.5)).unwrap();
        let b = gaussian_tilt_1d(-1.0, 2.0, &GaussianReward::Quadratic(0.5)).unwrap();
        assert_relative_eq!(out.mean[0], a.0, epsilon = 1e-14);
        assert_relative_eq!(out.mean[1], b.0, epsilon = 1e-14);
        assert_relative_eq!(out.covariance[(1, 1)], b.1, epsilon = 1e-14);
        assert_relative_eq!(out.log_normalizer, a.2 + b.2, epsilon = 1e-14);
    }

    #[test]
    fn snis_examples() {
        let target = GaussianMixture::standard(1).unwrap();
        let plain = snis_tilted_expectation(&target, &Reward::Zero, |x| x[0], 1000, &mut substream(1, 0, 0)).unwrap();
        let xs = target.sample(1000, &mut substream(1, 0, 0)).unwrap();
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / 1000.0;
        assert_relative_eq!(plain.estimate, mean, epsilon = 1e-12);

        let lin = snis_tilted_expectation(&target, &Reward::linear_uniform(0.5, 1), |x| x[0], 200_000, &mut substream(2, 0, 0))
            .unwrap();
        assert!((lin.estimate - 0.5).abs() < 3.0 * lin.stderr, "{lin:?}");
        let quad = snis_tilted_expectation(&target, &Reward::Quadratic { gamma: 1.0 }, |x| x[0] * x[0], 200_000, &mut substream(3, 0, 0))
            .unwrap();
        assert!((quad.estimate - 0.5).abs() < 3.0 * quad.stderr, "{quad:?}");
        assert!(snis_tilted_expectation(&target, &Reward::Zero, |x| x[0], 99, &mut substream(1, 0, 0)).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let lambda = dvector![0.3, -1.1];
        let g = finite_diff_grad(|x| lambda.dot(x), &dvector![4.0, -2.0], 1e-3).unwrap();
        assert!((g - &lambda).norm() < 1e-10);
        let g = finite_diff_grad(|x| -0.5 * x.norm_squared(), &dvector![1.0, 2.0], 1e-5).unwrap();
        assert!((g - dvector![-1.0, -2.0]).norm() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &dvector![1.0], 1e-5).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(finite_diff_grad(|_| 0.0, &dvector![1.0], 0.0).is_err());
    }
}
