//! Gaussian mixtures with cached Cholesky factors.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::State;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A weighted sum of Gaussian components.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<State>,
    covariances: Vec<DMatrix<f64>>,
    factors: Vec<Cholesky<f64, Dyn>>,
    // log w_k - log det L_k - d/2 log(2 pi)
    log_norms: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<State>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if weights.len() != means.len() || weights.len() != covariances.len() {
            return Err(Error::InvalidMixture(format!(
                "{} weights, {} means, {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidMixture("weights must be strictly positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("zero-dimensional state".into()));
        }
        let mut factors = Vec::with_capacity(weights.len());
        let mut log_norms = Vec::with_capacity(weights.len());
        for (k, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim || c.nrows() != dim || c.ncols() != dim {
                return Err(Error::InvalidMixture(format!("component {k} has inconsistent dimension")));
            }
            if m.iter().chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {k} has non-finite entries")));
            }
            let scale = c.amax().max(1.0);
            if (c - c.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidMixture(format!("covariance {k} is not symmetric")));
            }
            let chol = Cholesky::new(c.clone())
                .ok_or_else(|| Error::InvalidMixture(format!("covariance {k} is not positive-definite")))?;
            let log_det_l: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
            log_norms.push(weights[k].ln() - log_det_l - 0.5 * dim as f64 * (2.0 * PI).ln());
            factors.push(chol);
        }
        Ok(Self { weights, means, covariances, factors, log_norms })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: State, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(alloc::vec![1.0], alloc::vec![mean], alloc::vec![cov])
    }

    /// `N(mean, variance * I)`.
    pub fn isotropic(mean: State, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::gaussian(mean, DMatrix::identity(d, d) * variance)
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::isotropic(DVector::zeros(dim), 1.0)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[State] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Lower Cholesky factor of component `k`.
    pub fn cholesky_factor(&self, k: usize) -> DMatrix<f64> {
        self.factors[k].l()
    }

    fn check(&self, x: &State) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// Per-component `log w_k + log N(x; m_k, C_k)` and the whitened residuals
    /// `C_k^{-1} (x - m_k)`.
    fn component_terms(&self, x: &State) -> (Vec<f64>, Vec<State>) {
        let mut logs = Vec::with_capacity(self.len());
        let mut pulls = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let diff = x - &self.means[k];
            let mut z = diff.clone();
            self.factors[k].l_dirty().solve_lower_triangular_mut(&mut z);
            logs.push(self.log_norms[k] - 0.5 * z.norm_squared());
            pulls.push(self.factors[k].solve(&diff));
        }
        (logs, pulls)
    }

    pub fn log_density(&self, x: &State) -> Result<f64> {
        self.check(x)?;
        let (logs, _) = self.component_terms(x);
        Ok(log_sum_exp(&logs))
    }

    /// Posterior component probabilities `p(k | x)` in log space.
    pub fn log_responsibilities(&self, x: &State) -> Result<Vec<f64>> {
        self.check(x)?;
        let (mut logs, _) = self.component_terms(x);
        let lse = log_sum_exp(&logs);
        logs.iter_mut().for_each(|l| *l -= lse);
        Ok(logs)
    }

    /// `grad log rho(x)`.
    pub fn score(&self, x: &State) -> Result<State> {
        self.check(x)?;
        let (logs, pulls) = self.component_terms(x);
        let lse = log_sum_exp(&logs);
        let mut s = DVector::zeros(self.dim());
        for (l, pull) in logs.iter().zip(&pulls) {
            s -= pull * (l - lse).exp();
        }
        Ok(s)
    }

    /// `log p(k | x)` together with its gradient `grad log p(k | x)`.
    pub fn log_responsibility_with_gradient(&self, x: &State, k: usize) -> Result<(f64, State)> {
        self.check(x)?;
        if k >= self.len() {
            return Err(invalid(format!("component {k} out of range")));
        }
        let (logs, pulls) = self.component_terms(x);
        let lse = log_sum_exp(&logs);
        // grad log p(k|x) = -C_k^{-1}(x - m_k) - score(x)
        let mut grad = -&pulls[k];
        for (l, pull) in logs.iter().zip(&pulls) {
            grad += pull * (l - lse).exp();
        }
        Ok((logs[k] - lse, grad))
    }

    /// Shannon entropy (nats) of the posterior over components at `x`.
    pub fn posterior_entropy(&self, x: &State) -> Result<f64> {
        let logs = self.log_responsibilities(x)?;
        Ok(-logs
            .iter()
            .filter(|l| l.is_finite())
            .map(|l| l.exp() * l)
            .sum::<f64>())
    }

    /// `n` i.i.d. draws: a component by weight, then `m + L z`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<State>> {
        if n == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let picker = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidMixture(format!("{e}")))?;
        let d = self.dim();
        let lowers: Vec<DMatrix<f64>> = self.factors.iter().map(|f| f.l()).collect();
        Ok((0..n)
            .map(|_| {
                let k = picker.sample(rng);
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.means[k] + &lowers[k] * z
            })
            .collect())
    }
}

/// Numerically stable `log sum exp`. Returns `-inf` for empty or all-`-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use alloc::vec;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn two_mode() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![dvector![-2.0, 0.0], dvector![2.0, 0.0]],
            vec![DMatrix::identity(2, 2) * 0.25, DMatrix::identity(2, 2) * 0.25],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_weights() {
        let m = vec![dvector![0.0], dvector![1.0]];
        let c = vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)];
        assert!(GaussianMixture::new(vec![0.5, 0.6], m.clone(), c.clone()).is_err());
        assert!(GaussianMixture::new(vec![1.0, 0.0], m, c).is_err());
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianMixture::gaussian(dvector![0.0, 0.0], c).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianMixture::gaussian(dvector![0.0, 0.0], asym).is_err());
    }

    #[test]
    fn standard_normal_log_density() {
        let g = GaussianMixture::standard(1).unwrap();
        let x = dvector![0.7];
        let expected = -0.5 * 0.49 - 0.5 * (2.0 * PI).ln();
        assert_relative_eq!(g.log_density(&x).unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(g.score(&x).unwrap()[0], -0.7, epsilon = 1e-14);
    }

    #[test]
    fn responsibilities_far_from_means_do_not_underflow() {
        let g = two_mode();
        let logs = g.log_responsibilities(&dvector![-60.0, 3.0]).unwrap();
        assert!(logs.iter().all(|l| l.is_finite()));
        assert_relative_eq!(logs[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(logs[1], -960.0, epsilon = 1e-9);
    }

    #[test]
    fn log_responsibility_gradient_matches_differences() {
        let g = two_mode();
        let x = dvector![0.3, -0.4];
        let (_, grad) = g.log_responsibility_with_gradient(&x, 1).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (g.log_responsibilities(&xp).unwrap()[1] - g.log_responsibilities(&xm).unwrap()[1]) / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn sample_moments() {
        let g = GaussianMixture::standard(1).unwrap();
        let mut rng = substream(7, 0, 0);
        let n = 1_000_000;
        let xs = g.sample(n, &mut rng).unwrap();
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn degenerate_variance_samples_stay_at_mean() {
        let g = GaussianMixture::isotropic(dvector![1.0, -2.0], 1e-12).unwrap();
        let xs = g.sample(1000, &mut substream(1, 2, 3)).unwrap();
        for x in xs {
            assert!((x - dvector![1.0, -2.0]).amax() < 1e-5);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_zero() {
        let g = two_mode();
        let a = g.sample(50, &mut substream(11, 0, 0)).unwrap();
        let b = g.sample(50, &mut substream(11, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert!(g.sample(0, &mut substream(11, 0, 0)).is_err());
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]), 2f64.ln());
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
    }
}
