//! Closed-form interpolant dynamics between two Gaussian mixtures under the
//! independent coupling.
//!
//! For a base component `N(m_i, C_i)` and a target component `N(n_j, S_j)` the
//! law of `I_t` is `N(alpha m_i + beta n_j, alpha^2 C_i + beta^2 S_j)`. Each pair
//! caches a basis `P` with `C = P P^T` and `S = P diag(lambda) P^T`, so the
//! path covariance is `P diag(alpha^2 + beta^2 lambda) P^T` at every time and
//! no factorization happens after construction.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, GaussianMixture};
use crate::schedule::{Coefficients, InterpolantSchedule};
use crate::State;

/// One Gaussian component of `rho_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathComponent {
    pub weight: f64,
    pub mean: State,
    pub covariance: DMatrix<f64>,
}

/// Velocity, score, denoiser and log-density at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsAt {
    pub velocity: State,
    pub score: State,
    pub denoiser: State,
    pub log_density: f64,
}

#[derive(Debug, Clone)]
struct PairTerm {
    log_weight: f64,
    weight: f64,
    base_mean: State,
    target_mean: State,
    base_cov: DMatrix<f64>,
    target_cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    whiten: DMatrix<f64>,
    rel_eigs: DVector<f64>,
    log_det_basis: f64,
}

impl PairTerm {
    fn new(
        weight: f64,
        base_mean: &State,
        base_cov: &DMatrix<f64>,
        lower: DMatrix<f64>,
        target_mean: &State,
        target_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        let d = lower.nrows();
        let mut lower_inv = DMatrix::identity(d, d);
        if !lower.solve_lower_triangular_mut(&mut lower_inv) {
            return Err(Error::InvalidMixture("singular base covariance".into()));
        }
        let rel = &lower_inv * target_cov * lower_inv.transpose();
        let rel = (&rel + rel.transpose()) * 0.5;
        let eig = SymmetricEigen::new(rel);
        if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidMixture("target covariance is not positive-definite".into()));
        }
        let log_det_basis = lower.diagonal().iter().map(|v| v.ln()).sum();
        let basis = &lower * &eig.eigenvectors;
        let whiten = eig.eigenvectors.transpose() * lower_inv;
        Ok(Self {
            log_weight: weight.ln(),
            weight,
            base_mean: base_mean.clone(),
            target_mean: target_mean.clone(),
            base_cov: base_cov.clone(),
            target_cov: target_cov.clone(),
            basis,
            whiten,
            rel_eigs: eig.eigenvalues,
            log_det_basis,
        })
    }

    fn mean(&self, c: &Coefficients) -> State {
        &self.base_mean * c.alpha + &self.target_mean * c.beta
    }

    /// `alpha^2 + beta^2 lambda_k` per basis direction.
    fn spectrum(&self, c: &Coefficients) -> DVector<f64> {
        self.rel_eigs.map(|l| c.alpha * c.alpha + c.beta * c.beta * l)
    }

    fn local(&self, c: &Coefficients, x: &State) -> Local {
        let d = x.len();
        let z = &self.whiten * (x - self.mean(c));
        let spectrum = self.spectrum(c);
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for k in 0..d {
            quad += z[k] * z[k] / spectrum[k];
            log_det += spectrum[k].ln();
        }
        let log_w = self.log_weight
            - 0.5 * quad
            - 0.5 * log_det
            - self.log_det_basis
            - 0.5 * d as f64 * (2.0 * PI).ln();
        let scaled = z.component_div(&spectrum);
        Local { log_w, scaled, spectrum }
    }

    /// Log-weight at `x`, writing `z / spectrum` into `scaled` without allocating.
    fn log_weight_into(&self, c: &Coefficients, x: &[f64], scaled: &mut [f64]) -> f64 {
        let d = x.len();
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for k in 0..d {
            let mut z = 0.0;
            for j in 0..d {
                let centred = x[j] - c.alpha * self.base_mean[j] - c.beta * self.target_mean[j];
                z += self.whiten[(k, j)] * centred;
            }
            let spectrum = c.alpha * c.alpha + c.beta * c.beta * self.rel_eigs[k];
            quad += z * z / spectrum;
            log_det += spectrum.ln();
            scaled[k] = z / spectrum;
        }
        self.log_weight - 0.5 * quad - 0.5 * log_det - self.log_det_basis - 0.5 * d as f64 * (2.0 * PI).ln()
    }

    /// `out += r * velocity` from the output of `log_weight_into`.
    fn add_velocity(&self, c: &Coefficients, scaled: &[f64], r: f64, out: &mut [f64]) {
        let d = scaled.len();
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = c.alpha_dot * self.base_mean[i] + c.beta_dot * self.target_mean[i];
            for k in 0..d {
                let gain = c.alpha_dot * c.alpha + c.beta_dot * c.beta * self.rel_eigs[k];
                v += self.basis[(i, k)] * gain * scaled[k];
            }
            *o += r * v;
        }
    }

    /// `out += r * grad velocity` for a single pair, `P diag(gain / spectrum) W`.
    fn add_velocity_gradient(&self, c: &Coefficients, r: f64, out: &mut DMatrix<f64>) {
        let d = self.rel_eigs.len();
        for k in 0..d {
            let lam = self.rel_eigs[k];
            let scale = r * (c.alpha_dot * c.alpha + c.beta_dot * c.beta * lam) / (c.alpha * c.alpha + c.beta * c.beta * lam);
            for i in 0..d {
                let left = self.basis[(i, k)] * scale;
                for j in 0..d {
                    out[(i, j)] += left * self.whiten[(k, j)];
                }
            }
        }
    }

    fn score(&self, l: &Local) -> State {
        -(self.whiten.tr_mul(&l.scaled))
    }

    fn velocity(&self, c: &Coefficients, l: &Local) -> State {
        let gain = self.rel_eigs.map(|lam| c.alpha_dot * c.alpha + c.beta_dot * c.beta * lam);
        &self.base_mean * c.alpha_dot
            + &self.target_mean * c.beta_dot
            + &self.basis * gain.component_mul(&l.scaled)
    }

    fn denoiser(&self, c: &Coefficients, l: &Local) -> State {
        let gain = self.rel_eigs.map(|lam| c.beta * lam);
        &self.target_mean + &self.basis * gain.component_mul(&l.scaled)
    }

    fn base_posterior(&self, c: &Coefficients, l: &Local) -> State {
        &self.base_mean + &self.basis * (&l.scaled * c.alpha)
    }

    /// `P diag(gain / spectrum) W`.
    fn sandwich(&self, gain: &DVector<f64>, l: &Local) -> DMatrix<f64> {
        let mut scaled_basis = self.basis.clone();
        for (k, mut col) in scaled_basis.column_iter_mut().enumerate() {
            col *= gain[k] / l.spectrum[k];
        }
        scaled_basis * &self.whiten
    }

    fn velocity_gradient(&self, c: &Coefficients, l: &Local) -> DMatrix<f64> {
        let gain = self.rel_eigs.map(|lam| c.alpha_dot * c.alpha + c.beta_dot * c.beta * lam);
        self.sandwich(&gain, l)
    }

    fn denoiser_gradient(&self, c: &Coefficients, l: &Local) -> DMatrix<f64> {
        let gain = self.rel_eigs.map(|lam| c.beta * lam);
        self.sandwich(&gain, l)
    }

    /// `-Sigma(t)^{-1}`.
    fn score_gradient(&self, l: &Local) -> DMatrix<f64> {
        let mut scaled = self.whiten.clone();
        for (k, mut row) in scaled.row_iter_mut().enumerate() {
            row /= l.spectrum[k];
        }
        -(self.whiten.tr_mul(&scaled))
    }
}

struct Local {
    log_w: f64,
    scaled: DVector<f64>,
    spectrum: DVector<f64>,
}

/// The path `rho_t` between a base and a target mixture.
#[derive(Debug, Clone)]
pub struct MixturePath {
    base: GaussianMixture,
    target: GaussianMixture,
    schedule: InterpolantSchedule,
    pairs: Vec<PairTerm>,
}

impl MixturePath {
    pub fn new(base: GaussianMixture, target: GaussianMixture, schedule: InterpolantSchedule) -> Result<Self> {
        if base.dim() != target.dim() {
            return Err(Error::Dimension { expected: base.dim(), got: target.dim() });
        }
        schedule.validate()?;
        let mut pairs = Vec::with_capacity(base.len() * target.len());
        for i in 0..base.len() {
            let lower = base.cholesky_factor(i);
            for j in 0..target.len() {
                pairs.push(PairTerm::new(
                    base.weights()[i] * target.weights()[j],
                    &base.means()[i],
                    &base.covariances()[i],
                    lower.clone(),
                    &target.means()[j],
                    &target.covariances()[j],
                )?);
            }
        }
        Ok(Self { base, target, schedule, pairs })
    }

    pub fn base(&self) -> &GaussianMixture {
        &self.base
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.target
    }

    pub fn schedule(&self) -> &InterpolantSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// True when base and target are both single Gaussians.
    pub fn is_gaussian_pair(&self) -> bool {
        self.base.len() == 1 && self.target.len() == 1
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

    /// Components of `rho_t`: weight `w_i u_j`, mean `alpha m_i + beta n_j`,
    /// covariance `alpha^2 C_i + beta^2 S_j`.
    pub fn components(&self, t: f64) -> Vec<PathComponent> {
        let c = self.schedule.coefficients(t);
        self.pairs
            .iter()
            .map(|p| PathComponent {
                weight: p.weight,
                mean: p.mean(&c),
                covariance: &p.base_cov * (c.alpha * c.alpha) + &p.target_cov * (c.beta * c.beta),
            })
            .collect()
    }

    /// Evaluates every pair and normalizes responsibilities in log space.
    fn locals(&self, c: &Coefficients, x: &State) -> (Vec<Local>, Vec<f64>) {
        let locals: Vec<Local> = self.pairs.iter().map(|p| p.local(c, x)).collect();
        let logs: Vec<f64> = locals.iter().map(|l| l.log_w).collect();
        let lse = log_sum_exp(&logs);
        let resp = logs.iter().map(|l| (l - lse).exp()).collect();
        (locals, resp)
    }

    pub fn dynamics(&self, t: f64, x: &State) -> Result<DynamicsAt> {
        self.check(x)?;
        let c = self.schedule.coefficients(t);
        let locals: Vec<Local> = self.pairs.iter().map(|p| p.local(&c, x)).collect();
        let logs: Vec<f64> = locals.iter().map(|l| l.log_w).collect();
        let lse = log_sum_exp(&logs);
        let d = self.dim();
        let mut out = DynamicsAt {
            velocity: DVector::zeros(d),
            score: DVector::zeros(d),
            denoiser: DVector::zeros(d),
            log_density: lse,
        };
        for (p, l) in self.pairs.iter().zip(&locals) {
            let r = (l.log_w - lse).exp();
            out.velocity += p.velocity(&c, l) * r;
            out.score += p.score(l) * r;
            out.denoiser += p.denoiser(&c, l) * r;
        }
        Ok(out)
    }

    pub fn velocity(&self, t: f64, x: &State) -> Result<State> {
        self.check(x)?;
        let mut v = DVector::zeros(self.dim());
        self.velocity_into(t, x.as_slice(), v.as_mut_slice())?;
        Ok(v)
    }

    /// `b_t(x)` written into `out`; the allocation-light form used inside ODE solves.
    pub fn velocity_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || out.len() != d {
            return Err(Error::Dimension { expected: d, got: if x.len() != d { x.len() } else { out.len() } });
        }
        let c = self.schedule.coefficients(t);
        out.iter_mut().for_each(|o| *o = 0.0);
        if let [pair] = self.pairs.as_slice() {
            let mut scaled = [0.0; 8];
            let mut heap;
            let scaled: &mut [f64] = if d <= scaled.len() {
                &mut scaled[..d]
            } else {
                heap = alloc::vec![0.0; d];
                &mut heap
            };
            pair.log_weight_into(&c, x, scaled);
            pair.add_velocity(&c, scaled, 1.0, out);
        } else {
            let mut scaled = alloc::vec![0.0; d * self.pairs.len()];
            let logs: Vec<f64> = self
                .pairs
                .iter()
                .zip(scaled.chunks_mut(d))
                .map(|(p, buf)| p.log_weight_into(&c, x, buf))
                .collect();
            let lse = log_sum_exp(&logs);
            for ((p, buf), lw) in self.pairs.iter().zip(scaled.chunks(d)).zip(&logs) {
                p.add_velocity(&c, buf, (lw - lse).exp(), out);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    pub fn log_density(&self, t: f64, x: &State) -> Result<f64> {
        self.check(x)?;
        let c = self.schedule.coefficients(t);
        let logs: Vec<f64> = self.pairs.iter().map(|p| p.local(&c, x).log_w).collect();
        Ok(log_sum_exp(&logs))
    }

    /// `(E[x_0 | I_t = x], E[x_1 | I_t = x])`.
    pub fn posterior_endpoints(&self, t: f64, x: &State) -> Result<(State, State)> {
        self.check(x)?;
        let c = self.schedule.coefficients(t);
        let (locals, resp) = self.locals(&c, x);
        let d = self.dim();
        let (mut x0, mut x1) = (DVector::zeros(d), DVector::zeros(d));
        for ((p, l), r) in self.pairs.iter().zip(&locals).zip(&resp) {
            x0 += p.base_posterior(&c, l) * *r;
            x1 += p.denoiser(&c, l) * *r;
        }
        Ok((x0, x1))
    }

    /// Mixture average of per-pair affine maps `f_c` with Jacobians `G_c`:
    /// `grad sum p_c f_c = sum p_c G_c + sum p_c f_c (g_c - s)^T` where `g_c` is
    /// the per-pair score and `s` the mixture score.
    fn mixed_with_gradient(
        &self,
        t: f64,
        x: &State,
        value: impl Fn(&PairTerm, &Coefficients, &Local) -> State,
        gradient: impl Fn(&PairTerm, &Coefficients, &Local) -> DMatrix<f64>,
    ) -> Result<(State, DMatrix<f64>)> {
        self.check(x)?;
        let c = self.schedule.coefficients(t);
        let (locals, resp) = self.locals(&c, x);
        let d = self.dim();
        let mut scores = Vec::with_capacity(locals.len());
        let mut score = DVector::zeros(d);
        for ((p, l), r) in self.pairs.iter().zip(&locals).zip(&resp) {
            let g = p.score(l);
            score += &g * *r;
            scores.push(g);
        }
        let mut f = DVector::zeros(d);
        let mut jac = DMatrix::zeros(d, d);
        for (((p, l), r), g) in self.pairs.iter().zip(&locals).zip(&resp).zip(&scores) {
            let fc = value(p, &c, l);
            jac += gradient(p, &c, l) * *r;
            jac.ger(*r, &fc, &(g - &score), 1.0);
            f += fc * *r;
        }
        Ok((f, jac))
    }

    /// `b_t(x)` into `velocity` and `grad b_t(x)` into `gradient`; the
    /// allocation-light form used by sensitivity solves.
    pub fn velocity_with_gradient_into(
        &self,
        t: f64,
        x: &[f64],
        velocity: &mut [f64],
        gradient: &mut DMatrix<f64>,
    ) -> Result<()> {
        let d = self.dim();
        if x.len() != d || velocity.len() != d || gradient.shape() != (d, d) {
            return Err(Error::Dimension { expected: d, got: x.len() });
        }
        let c = self.schedule.coefficients(t);
        velocity.iter_mut().for_each(|v| *v = 0.0);
        gradient.fill(0.0);
        if let [pair] = self.pairs.as_slice() {
            let mut scaled = [0.0; 8];
            let mut heap;
            let scaled: &mut [f64] = if d <= scaled.len() {
                &mut scaled[..d]
            } else {
                heap = alloc::vec![0.0; d];
                &mut heap
            };
            pair.log_weight_into(&c, x, scaled);
            pair.add_velocity(&c, scaled, 1.0, velocity);
            pair.add_velocity_gradient(&c, 1.0, gradient);
        } else {
            let m = self.pairs.len();
            // Per pair: scaled offset, velocity, score.
            let mut scratch = alloc::vec![0.0; 3 * d * m];
            let (scaled, rest) = scratch.split_at_mut(d * m);
            let (values, scores) = rest.split_at_mut(d * m);
            let logs: Vec<f64> = self
                .pairs
                .iter()
                .zip(scaled.chunks_mut(d))
                .map(|(p, buf)| p.log_weight_into(&c, x, buf))
                .collect();
            let lse = log_sum_exp(&logs);
            let mut score = alloc::vec![0.0; d];
            for (idx, p) in self.pairs.iter().enumerate() {
                let r = (logs[idx] - lse).exp();
                let z = &scaled[idx * d..(idx + 1) * d];
                let f = &mut values[idx * d..(idx + 1) * d];
                p.add_velocity(&c, z, 1.0, f);
                let g = &mut scores[idx * d..(idx + 1) * d];
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = -(0..d).map(|k| p.whiten[(k, j)] * z[k]).sum::<f64>();
                    score[j] += r * *gj;
                }
                for (v, fi) in velocity.iter_mut().zip(f.iter()) {
                    *v += r * fi;
                }
                p.add_velocity_gradient(&c, r, gradient);
            }
            for idx in 0..m {
                let r = (logs[idx] - lse).exp();
                let f = &values[idx * d..(idx + 1) * d];
                let g = &scores[idx * d..(idx + 1) * d];
                for i in 0..d {
                    for j in 0..d {
                        gradient[(i, j)] += r * f[i] * (g[j] - score[j]);
                    }
                }
            }
        }
        if velocity.iter().chain(gradient.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// `b_t(x)` and `grad b_t(x)`.
    pub fn velocity_with_gradient(&self, t: f64, x: &State) -> Result<(State, DMatrix<f64>)> {
        self.mixed_with_gradient(t, x, PairTerm::velocity, PairTerm::velocity_gradient)
    }

    /// `D_t(x)` and `grad D_t(x)`.
    pub fn denoiser_with_gradient(&self, t: f64, x: &State) -> Result<(State, DMatrix<f64>)> {
        self.mixed_with_gradient(t, x, PairTerm::denoiser, PairTerm::denoiser_gradient)
    }

    /// `s_t(x)` and the Hessian of `log rho_t(x)`.
    pub fn score_with_gradient(&self, t: f64, x: &State) -> Result<(State, DMatrix<f64>)> {
        self.mixed_with_gradient(t, x, |p, _, l| p.score(l), |p, _, l| p.score_gradient(l))
    }
}
