//! Two-time flow map `X_{s,t}` of the probability-flow ODE `x' = b_t(x)`.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cell::RefCell;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::ode::{integrate, Tolerances};
use crate::path::MixturePath;
use crate::State;

/// Endpoint and spatial Jacobian of the flow map.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianResult {
    pub endpoint: State,
    pub jacobian: DMatrix<f64>,
}

/// Fixed-step scheme for few-step maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepScheme {
    #[default]
    Euler,
    Heun,
}

#[derive(Debug, Clone)]
pub struct FlowMapEvaluator {
    path: Arc<MixturePath>,
    tol: Tolerances,
}

impl FlowMapEvaluator {
    pub fn new(path: Arc<MixturePath>, tol: Tolerances) -> Result<Self> {
        tol.validate()?;
        Ok(Self { path, tol })
    }

    pub fn path(&self) -> &Arc<MixturePath> {
        &self.path
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tol
    }

    pub fn with_tolerances(&self, tol: Tolerances) -> Result<Self> {
        Self::new(self.path.clone(), tol)
    }

    fn check_times(s: f64, t: f64) -> Result<()> {
        if !((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t)) {
            return Err(invalid("flow-map times must lie in [0, 1]"));
        }
        Ok(())
    }

    fn check_state(&self, x: &State) -> Result<()> {
        if x.len() != self.path.dim() {
            return Err(Error::Dimension { expected: self.path.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// `X_{s,t}(x)`.
    pub fn flow_map(&self, s: f64, t: f64, x: &State) -> Result<State> {
        Self::check_times(s, t)?;
        self.check_state(x)?;
        if s == t {
            return Ok(x.clone());
        }
        let path = &self.path;
        let mut y: Vec<f64> = x.iter().copied().collect();
        integrate(
            |tau, y, dy| path.velocity_into(tau, y, dy),
            s,
            t,
            &mut y,
            &self.tol,
        )?;
        Ok(DVector::from_vec(y))
    }

    /// `X_{s,t}(x)` and `grad X_{s,t}(x)` from the forward sensitivity system
    /// `J' = grad b_tau(x) J`, `J(s) = I`.
    pub fn flow_map_jacobian(&self, s: f64, t: f64, x: &State) -> Result<JacobianResult> {
        Self::check_times(s, t)?;
        self.check_state(x)?;
        let d = x.len();
        if s == t {
            return Ok(JacobianResult { endpoint: x.clone(), jacobian: DMatrix::identity(d, d) });
        }
        let path = &self.path;
        let mut y = Vec::with_capacity(d + d * d);
        y.extend(x.iter().copied());
        y.extend(DMatrix::<f64>::identity(d, d).iter().copied());
        let mut grad = DMatrix::zeros(d, d);
        integrate(
            |tau, y, dy| {
                let (state, jac) = y.split_at(d);
                let (dstate, djac) = dy.split_at_mut(d);
                path.velocity_with_gradient_into(tau, state, dstate, &mut grad)?;
                // Column-major `grad * J`.
                for col in 0..d {
                    for row in 0..d {
                        djac[col * d + row] = (0..d).map(|k| grad[(row, k)] * jac[col * d + k]).sum();
                    }
                }
                Ok(())
            },
            s,
            t,
            &mut y,
            &self.tol,
        )?;
        Ok(JacobianResult {
            endpoint: DVector::from_column_slice(&y[..d]),
            jacobian: DMatrix::from_column_slice(d, d, &y[d..]),
        })
    }

    /// `k` fixed steps of the probability-flow ODE from `s` to `t`.
    pub fn k_step_map(&self, s: f64, t: f64, x: &State, k: usize, scheme: StepScheme) -> Result<State> {
        Ok(self.k_step(s, t, x, k, scheme, false)?.endpoint)
    }

    /// `k_step_map` together with the Jacobian of the discrete map.
    pub fn k_step_map_jacobian(
        &self,
        s: f64,
        t: f64,
        x: &State,
        k: usize,
        scheme: StepScheme,
    ) -> Result<JacobianResult> {
        self.k_step(s, t, x, k, scheme, true)
    }

    fn k_step(&self, s: f64, t: f64, x: &State, k: usize, scheme: StepScheme, jac: bool) -> Result<JacobianResult> {
        Self::check_times(s, t)?;
        self.check_state(x)?;
        if k == 0 {
            return Err(invalid("step count must be at least 1"));
        }
        let d = x.len();
        let h = (t - s) / k as f64;
        let mut y = x.clone();
        let mut j = DMatrix::identity(d, d);
        for i in 0..k {
            let tau = s + i as f64 * h;
            match scheme {
                StepScheme::Euler => {
                    if jac {
                        let (v, g) = self.path.velocity_with_gradient(tau, &y)?;
                        j = &j + (g * &j) * h;
                        y += v * h;
                    } else {
                        y += self.path.velocity(tau, &y)? * h;
                    }
                }
                StepScheme::Heun => {
                    if jac {
                        let (v0, g0) = self.path.velocity_with_gradient(tau, &y)?;
                        let pred = &y + &v0 * h;
                        let jp = &j + (&g0 * &j) * h;
                        let (v1, g1) = self.path.velocity_with_gradient(tau + h, &pred)?;
                        j = &j + (g0 * &j + g1 * jp) * (0.5 * h);
                        y += (v0 + v1) * (0.5 * h);
                    } else {
                        let v0 = self.path.velocity(tau, &y)?;
                        let pred = &y + &v0 * h;
                        let v1 = self.path.velocity(tau + h, &pred)?;
                        y += (v0 + v1) * (0.5 * h);
                    }
                }
            }
        }
        Ok(JacobianResult { endpoint: y, jacobian: j })
    }
}

/// Exact flow map of a single-Gaussian pair:
/// `X_{s,t}(x) = mu(t) + F(t) F(s)^{-1} (x - mu(s))` where `F(tau)` is the
/// square-root factor of `Sigma(tau)` aligned with the basis that
/// diagonalizes both endpoint covariances.
pub fn gaussian_pair_closed_form(path: &MixturePath, s: f64, t: f64, x: &State) -> Result<State> {
    Ok(gaussian_pair_affine(path, s, t)?.apply(x))
}

/// Affine form `x -> offset + matrix x` of the exact single-Gaussian map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: State,
}

impl AffineMap {
    pub fn apply(&self, x: &State) -> State {
        &self.matrix * x + &self.offset
    }
}

pub fn gaussian_pair_affine(path: &MixturePath, s: f64, t: f64) -> Result<AffineMap> {
    if !path.is_gaussian_pair() {
        return Err(invalid("closed-form flow map needs single-component base and target"));
    }
    let d = path.dim();
    let target_cov = &path.target().covariances()[0];
    let lower = path.base().cholesky_factor(0);
    let mut lower_inv = DMatrix::identity(d, d);
    lower.solve_lower_triangular_mut(&mut lower_inv);
    let rel = &lower_inv * target_cov * lower_inv.transpose();
    let eig = nalgebra::SymmetricEigen::new((&rel + rel.transpose()) * 0.5);
    let basis = &lower * &eig.eigenvectors;
    let whiten = eig.eigenvectors.transpose() * &lower_inv;
    let sched = path.schedule();
    let (cs, ct) = (sched.coefficients(s), sched.coefficients(t));
    let scale = DVector::from_fn(d, |k, _| {
        let lam = eig.eigenvalues[k];
        ((ct.alpha.powi(2) + ct.beta.powi(2) * lam) / (cs.alpha.powi(2) + cs.beta.powi(2) * lam)).sqrt()
    });
    let matrix = basis * DMatrix::from_diagonal(&scale) * whiten;
    let m = &path.base().means()[0];
    let n = &path.target().means()[0];
    let mu_s = m * cs.alpha + n * cs.beta;
    let mu_t = m * ct.alpha + n * ct.beta;
    let offset = mu_t - &matrix * mu_s;
    Ok(AffineMap { matrix, offset })
}

/// Memoizing front end for repeated `X_{s,1}` queries at identical inputs.
///
/// Single owner: clone one per worker.
#[derive(Debug, Clone)]
pub struct MemoFlowMap {
    inner: FlowMapEvaluator,
    cache: RefCell<BTreeMap<Vec<u64>, JacobianResult>>,
}

impl MemoFlowMap {
    pub fn new(inner: FlowMapEvaluator) -> Self {
        Self { inner, cache: RefCell::new(BTreeMap::new()) }
    }

    fn key(&self, s: f64, t: f64, x: &State) -> Vec<u64> {
        let tol = self.inner.tolerances();
        let mut key = Vec::with_capacity(x.len() + 4);
        key.extend([s.to_bits(), t.to_bits(), tol.rel_tol.to_bits(), tol.abs_tol.to_bits()]);
        key.extend(x.iter().map(|v| v.to_bits()));
        key
    }

    pub fn flow_map_jacobian(&self, s: f64, t: f64, x: &State) -> Result<JacobianResult> {
        let key = self.key(s, t, x);
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let value = self.inner.flow_map_jacobian(s, t, x)?;
        self.cache.borrow_mut().insert(key, value.clone());
        Ok(value)
    }

    pub fn len(&self) -> usize {
        self.cache.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.cache.borrow_mut().clear();
    }
}
