//! Fixed-seed invariant suites, one per core module.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use fmtt_core::diagnostics::{
    incremental_discrepancy, var_model, DiscrepancySign, DiscrepancyTrace, EstimatorOptions,
};
use fmtt_core::flowmap::{gaussian_pair_closed_form, FlowMapEvaluator, StepScheme};
use fmtt_core::mixture::GaussianMixture;
use fmtt_core::ode::Tolerances;
use fmtt_core::oracles::{finite_diff_grad, quadrature_1d, snis_tilted_expectation, TiltedOracle};
use fmtt_core::path::MixturePath;
use fmtt_core::reward::{hutchinson, HutchinsonConfig, LookAhead, ProbeKind, Reward, TimeDependentReward};
use fmtt_core::rng::{standard_normal, substream, INIT_STREAM};
use fmtt_core::schedule::Diffusion;
use fmtt_core::smc::{
    self as engine, ess, run_with, softmax, uniform_schedule, IncrementLog, Mode, ParticleEnsemble, Resampling,
    RunConfig, RunResult, StepRecord,
};
use fmtt_core::tilt::{log_weight_along, simulate_path, DriftMultiplier, LocalState, WeightScheme};
use fmtt_core::State;
use nalgebra::{dvector, DVector};
use rand::Rng;
use serde::Serialize;

use crate::commands::mean_stderr;
use crate::exec::Pool;
use crate::problems::{self, run_tol};

/// Default relative tolerance of the flow-map oracle checks.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

pub const SUITES: [&str; 7] =
    ["interpolant-core", "flowmap", "rewards", "tilt-dynamics", "smc-engine", "diagnostics", "oracles"];

#[derive(Debug, Clone)]
pub struct Options {
    pub seed: u64,
    pub rel_tol: f64,
    /// Run one suite; a unique prefix such as `flow` also works.
    pub only: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Self { seed: 0, rel_tol: DEFAULT_REL_TOL, only: None }
    }
}

impl Options {
    /// Flow-map tolerances for oracle checks; the absolute part tracks the relative.
    pub fn tol(&self) -> Tolerances {
        Tolerances::new(self.rel_tol, self.rel_tol * 1e-2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

pub type CheckResult = anyhow::Result<Outcome>;

fn outcome(passed: bool, detail: impl Into<String>) -> CheckResult {
    Ok(Outcome { passed, detail: detail.into() })
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn table(&self) -> String {
        let name_w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<name_w$} {:<6} {:>8}  detail", "suite", "check", "result", "seconds");
        for c in &self.checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{:<16} {:<name_w$} {:<6} {:>8.2}  {}", c.suite, c.name, verdict, c.seconds, c.detail);
        }
        let failed = self.failures().len();
        let _ = write!(out, "{} checks, {} passed, {} failed", self.checks.len(), self.checks.len() - failed, failed);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

type CheckFn = fn(&Options) -> CheckResult;

const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("interpolant-core", "score_from_velocity", interpolant::score_from_velocity),
    ("interpolant-core", "posterior_endpoints_interpolate", interpolant::posterior_endpoints),
    ("interpolant-core", "score_is_log_density_gradient", interpolant::score_gradient),
    ("interpolant-core", "continuity_equation", interpolant::continuity),
    ("interpolant-core", "path_endpoints", interpolant::endpoints),
    ("flowmap", "standard_pair_value", flowmap::standard_pair_value),
    ("flowmap", "closed_form_agreement", flowmap::closed_form_agreement),
    ("flowmap", "semigroup_and_inverse", flowmap::semigroup_and_inverse_check),
    ("flowmap", "tangent_identity", flowmap::tangent_identity),
    ("flowmap", "eulerian_identity", flowmap::eulerian_identity),
    ("flowmap", "jacobian_matches_differences", flowmap::jacobian_fd),
    ("flowmap", "few_step_convergence", flowmap::few_step_convergence),
    ("rewards", "compounding_identity", rewards::compounding_identity_check),
    ("rewards", "modes_agree_at_end", rewards::modes_agree_at_end),
    ("rewards", "gradients_match_differences", rewards::gradients_fd),
    ("rewards", "hutchinson_laplacian", rewards::hutchinson_check),
    ("tilt-dynamics", "scheme_consistency", tilt::scheme_consistency_check),
    ("tilt-dynamics", "constant_shift_equivariance", tilt::shift_equivariance),
    ("tilt-dynamics", "local_tilt_kernel", tilt::local_tilt_kernel),
    ("smc-engine", "unbiased_across_chi", smc::unbiased_across_chi_check),
    ("smc-engine", "softmax_invariance", smc::softmax_invariance),
    ("smc-engine", "zero_reward_flow_convergence", smc::flow_convergence),
    ("smc-engine", "base_dynamics_bitwise", smc::base_dynamics),
    ("smc-engine", "zero_reward_weights", smc::zero_reward_weights),
    ("smc-engine", "thread_count_independence", smc::thread_independence),
    ("smc-engine", "trivial_search_is_plain_run", smc::trivial_search),
    ("diagnostics", "zero_reward_exact", diagnostics::zero_reward),
    ("diagnostics", "two_particle_example", diagnostics::two_particle),
    ("diagnostics", "trace_bounds", diagnostics::trace_bounds),
    ("diagnostics", "pooled_matches_single_run", diagnostics::pooled_vs_single),
    ("diagnostics", "constant_trace_refines_to_itself", diagnostics::constant_trace),
    ("diagnostics", "refinement_reduces_discrepancy", diagnostics::refinement_check),
    ("diagnostics", "flow_map_look_ahead_ordering", diagnostics::look_ahead_ordering_check),
    ("diagnostics", "variance_model_formula", diagnostics::variance_model),
    ("oracles", "snis_stderr_halves", oracles::snis_halving),
    ("oracles", "closed_form_matches_snis", oracles::closed_form_vs_snis),
    ("oracles", "quadrature_matches_closed_form", oracles::quadrature_vs_closed_form),
    ("oracles", "finite_difference_examples", oracles::finite_differences),
];

/// Resolves `--only` to a suite name.
pub fn select(only: &str) -> anyhow::Result<&'static str> {
    if let Some(s) = SUITES.iter().find(|s| **s == only) {
        return Ok(s);
    }
    let hits: Vec<_> = SUITES.iter().filter(|s| s.starts_with(only)).collect();
    match hits.as_slice() {
        [one] => Ok(one),
        _ => anyhow::bail!("unknown suite {only:?}; expected one of {}", SUITES.join(", ")),
    }
}

pub fn run_suite(suite: &str, options: &Options) -> Vec<Check> {
    CHECKS
        .iter()
        .filter(|(s, _, _)| *s == suite)
        .map(|(suite, name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f(options) {
                Ok(o) => (o.passed, o.detail),
                Err(e) => (false, format!("error: {e:#}")),
            };
            Check { suite, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

pub fn run(options: &Options) -> anyhow::Result<Report> {
    let suites: Vec<&str> = match &options.only {
        Some(only) => vec![select(only)?],
        None => SUITES.to_vec(),
    };
    let mut report = Report::default();
    for s in suites {
        report.checks.extend(run_suite(s, options));
    }
    Ok(report)
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

/// Points along a line through the origin in `dim` dimensions.
fn grid_point(dim: usize, u: f64) -> State {
    DVector::from_fn(dim, |i, _| if i == 0 { u } else { -0.5 * u + 0.3 * i as f64 })
}

fn all_paths() -> Vec<(&'static str, Arc<MixturePath>)> {
    vec![
        ("standard_1d", problems::standard_1d()),
        ("asymmetric_1d", problems::asymmetric_1d()),
        ("bimodal_1d", problems::bimodal_1d()),
        ("gaussian_2d", problems::gaussian_2d()),
        ("two_mode_2d", problems::two_mode_2d(0.0)),
    ]
}

pub mod interpolant {
    use super::*;

    fn worst<F: FnMut(&MixturePath, f64, &State) -> anyhow::Result<f64>>(ts: &[f64], f: F) -> anyhow::Result<f64> {
        worst_over(all_paths(), ts, f)
    }

    fn worst_over<F>(paths: Vec<(&str, Arc<MixturePath>)>, ts: &[f64], mut f: F) -> anyhow::Result<f64>
    where
        F: FnMut(&MixturePath, f64, &State) -> anyhow::Result<f64>,
    {
        let mut worst = 0.0f64;
        for (_, path) in paths {
            for &t in ts {
                for u in linspace(-3.0, 3.0, 13) {
                    worst = worst.max(f(&path, t, &grid_point(path.dim(), u))?);
                }
            }
        }
        Ok(worst)
    }

    pub fn score_from_velocity(_: &Options) -> CheckResult {
        // The identity assumes a standard normal base.
        let standard: Vec<_> = all_paths()
            .into_iter()
            .filter(|(_, p)| {
                let b = p.base();
                b.len() == 1 && b.means()[0].iter().all(|m| *m == 0.0) && b.covariances()[0].is_identity(0.0)
            })
            .collect();
        let ts: Vec<f64> = linspace(0.0, 0.99, 12).collect();
        let w = worst_over(standard, &ts, |path, t, x| {
            let d = path.dynamics(t, x)?;
            let implied = (d.velocity * t - x) / (1.0 - t);
            Ok((implied - &d.score).norm() / (1.0 + d.score.norm()))
        })?;
        outcome(w <= 1e-10, format!("max relative residual {w:.2e}"))
    }

    pub fn posterior_endpoints(_: &Options) -> CheckResult {
        let ts: Vec<f64> = linspace(0.0, 1.0, 11).collect();
        let w = worst(&ts, |path, t, x| {
            let (x0, x1) = path.posterior_endpoints(t, x)?;
            let c = path.schedule().coefficients(t);
            Ok((x0 * c.alpha + x1 * c.beta - x).norm() / (1.0 + x.norm()))
        })?;
        outcome(w <= 1e-10, format!("max residual {w:.2e}"))
    }

    pub fn score_gradient(_: &Options) -> CheckResult {
        let ts: Vec<f64> = linspace(0.0, 1.0, 11).collect();
        let w = worst(&ts, |path, t, x| {
            let fd = finite_diff_grad(|y| path.log_density(t, y).unwrap_or(f64::NAN), x, 1e-5)?;
            let s = path.dynamics(t, x)?.score;
            Ok((fd - &s).norm() / (1.0 + s.norm()))
        })?;
        outcome(w <= 1e-6, format!("max relative error {w:.2e}"))
    }

    pub fn continuity(_: &Options) -> CheckResult {
        let ts: Vec<f64> = linspace(0.02, 0.98, 9).collect();
        let h = 1e-5;
        let w = worst(&ts, |path, t, x| {
            let dt = (path.log_density(t + h, x)? - path.log_density(t - h, x)?) / (2.0 * h);
            let (b, grad_b) = path.velocity_with_gradient(t, x)?;
            let s = path.dynamics(t, x)?.score;
            Ok((dt + grad_b.trace() + b.dot(&s)).abs())
        })?;
        outcome(w <= 1e-4, format!("max residual {w:.2e}"))
    }

    pub fn endpoints(_: &Options) -> CheckResult {
        let mut worst = 0.0f64;
        for (_, path) in all_paths() {
            for u in linspace(-3.0, 3.0, 13) {
                let x = grid_point(path.dim(), u);
                worst = worst.max((path.log_density(0.0, &x)? - path.base().log_density(&x)?).abs());
                worst = worst.max((path.log_density(1.0, &x)? - path.target().log_density(&x)?).abs());
            }
        }
        outcome(worst <= 1e-10, format!("max log-density gap {worst:.2e}"))
    }
}

pub mod flowmap {
    use super::*;

    pub fn standard_pair_value(o: &Options) -> CheckResult {
        let ev = FlowMapEvaluator::new(problems::standard_1d(), o.tol())?;
        let got = ev.flow_map(0.0, 0.5, &dvector![1.0])?[0];
        let err = (got - 0.5f64.sqrt()).abs();
        outcome(err <= 1e-8, format!("X_(0,0.5)(1) = {got:.12}, error {err:.2e}"))
    }

    pub fn closed_form_agreement(o: &Options) -> CheckResult {
        let mut rng = substream(o.seed, 11, 0);
        let mut worst = 0.0f64;
        for path in [problems::asymmetric_1d(), problems::gaussian_2d()] {
            let ev = FlowMapEvaluator::new(path.clone(), o.tol())?;
            for _ in 0..40 {
                let (s, t): (f64, f64) = (rng.random(), rng.random());
                let x = standard_normal(&mut rng, path.dim()) * 2.0;
                let exact = gaussian_pair_closed_form(&path, s, t, &x)?;
                worst = worst.max((ev.flow_map(s, t, &x)? - &exact).norm() / (1.0 + exact.norm()));
            }
        }
        outcome(worst <= 1e-8, format!("max relative error {worst:.2e}"))
    }

    /// Largest semigroup and inverse residuals over `triples` random time triples.
    pub fn semigroup_and_inverse(path: &Arc<MixturePath>, tol: Tolerances, triples: usize, seed: u64) -> anyhow::Result<(f64, f64)> {
        let ev = FlowMapEvaluator::new(path.clone(), tol)?;
        let mut rng = substream(seed, 12, 0);
        let (mut semi, mut inv) = (0.0f64, 0.0f64);
        for _ in 0..triples {
            let (s, t, u): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let x = standard_normal(&mut rng, path.dim()) * 1.5;
            let mid = ev.flow_map(s, t, &x)?;
            semi = semi.max((ev.flow_map(t, u, &mid)? - ev.flow_map(s, u, &x)?).norm());
            inv = inv.max((ev.flow_map(t, s, &mid)? - &x).norm());
        }
        Ok((semi, inv))
    }

    pub fn semigroup_and_inverse_check(o: &Options) -> CheckResult {
        let mut worst = (0.0f64, 0.0f64);
        for (_, path) in all_paths() {
            let (a, b) = semigroup_and_inverse(&path, o.tol(), 100, o.seed)?;
            worst = (worst.0.max(a), worst.1.max(b));
        }
        outcome(worst.0 <= 1e-6 && worst.1 <= 1e-6, format!("semigroup {:.2e}, inverse {:.2e}", worst.0, worst.1))
    }

    pub fn tangent_identity(o: &Options) -> CheckResult {
        let mut worst_ratio = 0.0f64;
        for (_, path) in all_paths() {
            let ev = FlowMapEvaluator::new(path.clone(), o.tol())?;
            for t in [0.1, 0.5, 0.85] {
                let x = grid_point(path.dim(), 0.7);
                let b = path.velocity(t, &x)?;
                let err = |h: f64| -> anyhow::Result<f64> { Ok(((ev.flow_map(t, t + h, &x)? - &x) / h - &b).norm()) };
                let (coarse, fine) = (err(1e-2)?, err(5e-3)?);
                worst_ratio = worst_ratio.max((fine - 1e-9).max(0.0) / coarse.max(1e-300));
            }
        }
        outcome(worst_ratio <= 0.6, format!("worst error ratio on halving h: {worst_ratio:.3}"))
    }

    pub fn eulerian_identity(o: &Options) -> CheckResult {
        let mut worst = 0.0f64;
        let h = 1e-4;
        for (_, path) in all_paths() {
            let ev = FlowMapEvaluator::new(path.clone(), o.tol())?;
            for s in [0.1, 0.4, 0.7] {
                for u in [-1.5, 0.2, 1.8] {
                    let x = grid_point(path.dim(), u);
                    let ds = (ev.flow_map(s + h, 1.0, &x)? - ev.flow_map(s - h, 1.0, &x)?) / (2.0 * h);
                    let jac = ev.flow_map_jacobian(s, 1.0, &x)?.jacobian;
                    worst = worst.max((ds + jac * path.velocity(s, &x)?).norm());
                }
            }
        }
        outcome(worst <= 1e-4, format!("max residual {worst:.2e}"))
    }

    pub fn jacobian_fd(o: &Options) -> CheckResult {
        let mut worst = 0.0f64;
        let h = 1e-5;
        for (_, path) in all_paths() {
            let ev = FlowMapEvaluator::new(path.clone(), o.tol())?;
            let x = grid_point(path.dim(), 0.4);
            let jac = ev.flow_map_jacobian(0.2, 0.9, &x)?.jacobian;
            for j in 0..path.dim() {
                let mut e = State::zeros(path.dim());
                e[j] = h;
                let col = (ev.flow_map(0.2, 0.9, &(&x + &e))? - ev.flow_map(0.2, 0.9, &(&x - &e))?) / (2.0 * h);
                worst = worst.max((col - jac.column(j)).norm());
            }
        }
        outcome(worst <= 1e-6, format!("max column error {worst:.2e}"))
    }

    pub fn few_step_convergence(o: &Options) -> CheckResult {
        let path = problems::bimodal_1d();
        let ev = FlowMapEvaluator::new(path, o.tol())?;
        let x = dvector![0.3];
        let exact = ev.flow_map(0.1, 1.0, &x)?;
        let mut detail = String::new();
        let mut ok = true;
        for scheme in [StepScheme::Euler, StepScheme::Heun] {
            let errs: Vec<f64> = [4, 8, 16, 32, 64]
                .iter()
                .map(|&k| Ok((ev.k_step_map(0.1, 1.0, &x, k, scheme)? - &exact).norm()))
                .collect::<anyhow::Result<_>>()?;
            ok &= errs.windows(2).all(|w| w[1] < w[0]);
            let _ = write!(detail, "{scheme:?} {:.1e}->{:.1e} ", errs[0], errs[errs.len() - 1]);
        }
        outcome(ok, detail.trim_end().to_string())
    }
}

pub mod rewards {
    use super::*;

    /// `max |b . grad r_t + d_t r_t - r(X_{t,1}(x))|` over a 20 x 20 grid.
    pub fn compounding_identity(path: &Arc<MixturePath>, reward: Reward, tol: Tolerances) -> anyhow::Result<f64> {
        let rt = problems::look_ahead(path, reward, LookAhead::FlowMap, tol)?;
        let mut worst = 0.0f64;
        for i in 0..20 {
            let t = (i as f64 + 0.5) / 20.0;
            for u in linspace(-3.0, 3.0, 20) {
                let x = grid_point(path.dim(), u);
                let look = rt.evaluate(t, &x)?;
                let lhs = path.velocity(t, &x)?.dot(&look.gradient) + rt.time_derivative(t, &x, 1e-4)?;
                worst = worst.max((lhs - look.terminal).abs());
            }
        }
        Ok(worst)
    }

    /// The 1D and 2D single-Gaussian pairs with nonlinear rewards.
    pub fn compounding_cases() -> Vec<(&'static str, Arc<MixturePath>, Reward)> {
        let bumpy = Reward::LogResponsibility { mixture: Arc::new(problems::two_mode_target()), component: 1, scale: 1.0 };
        vec![
            ("asymmetric_1d quadratic", problems::asymmetric_1d(), Reward::Quadratic { gamma: 0.5 }),
            ("standard_1d quadratic", problems::standard_1d(), Reward::Quadratic { gamma: 2.0 }),
            ("gaussian_2d responsibility", problems::gaussian_2d(), bumpy),
        ]
    }

    pub fn compounding_identity_check(o: &Options) -> CheckResult {
        let mut detail = Vec::new();
        let mut worst = 0.0f64;
        for (name, path, reward) in compounding_cases() {
            let w = compounding_identity(&path, reward, o.tol())?;
            worst = worst.max(w);
            detail.push(format!("{name} {w:.1e}"));
        }
        outcome(worst <= 1e-4, detail.join(", "))
    }

    pub fn modes_agree_at_end(o: &Options) -> CheckResult {
        let mut ok = true;
        for (_, path) in all_paths() {
            let reward = Reward::LogResponsibility { mixture: Arc::new(path.target().clone()), component: 0, scale: 1.0 };
            let x = grid_point(path.dim(), 0.4);
            let plain = reward.value(&x)?;
            for mode in [
                LookAhead::Naive,
                LookAhead::Denoiser,
                LookAhead::FlowMap,
                LookAhead::FlowMapSteps { steps: 3, scheme: StepScheme::Heun },
            ] {
                let rt = problems::look_ahead(&path, reward.clone(), mode, o.tol())?;
                ok &= rt.eval(1.0, &x)? == plain && rt.evaluate(1.0, &x)?.terminal == plain;
            }
        }
        outcome(ok, "r_1(x) == r(x) exactly for every mode")
    }

    pub fn gradients_fd(o: &Options) -> CheckResult {
        let mut worst = 0.0f64;
        for (_, path) in all_paths() {
            let reward = Reward::LogResponsibility { mixture: Arc::new(problems::two_mode_target()), component: 1, scale: 0.7 };
            let reward = if path.dim() == 1 { Reward::Quadratic { gamma: 0.8 } } else { reward };
            for mode in [LookAhead::Naive, LookAhead::Denoiser, LookAhead::FlowMap] {
                let rt = problems::look_ahead(&path, reward.clone(), mode, o.tol())?;
                for t in [0.2, 0.6] {
                    let x = grid_point(path.dim(), -0.8);
                    let fd = finite_diff_grad(|y| rt.eval(t, y).unwrap_or(f64::NAN), &x, 1e-5)?;
                    worst = worst.max((fd - rt.grad(t, &x)?).norm());
                }
            }
        }
        outcome(worst <= 1e-5, format!("max gradient error {worst:.2e}"))
    }

    /// Hutchinson estimate of the Laplacian of `-|x|^2 / 2` in 2D, and the
    /// mean standard-error ratio between `probes` and `4 * probes` over `seeds` seeds.
    pub fn hutchinson_quadratic(probes: usize, seeds: u64, seed: u64) -> anyhow::Result<(f64, f64, f64)> {
        let reward = Reward::Quadratic { gamma: 1.0 };
        let x = dvector![0.3, -1.2];
        let cfg = |m| HutchinsonConfig { probes: m, radius: 1e-3, kind: ProbeKind::Gaussian };
        let grad = |y: &State| reward.gradient(y);
        let first = hutchinson(grad, &x, &cfg(probes), &mut substream(seed, 21, 0))?;
        let mut ratios = Vec::new();
        for s in 0..seeds {
            let a = hutchinson(grad, &x, &cfg(probes), &mut substream(seed, 22, s))?;
            let b = hutchinson(grad, &x, &cfg(4 * probes), &mut substream(seed, 23, s))?;
            ratios.push(a.stderr / b.stderr);
        }
        let (ratio, _) = mean_stderr(&ratios);
        Ok((first.value, first.stderr, ratio))
    }

    pub fn hutchinson_check(o: &Options) -> CheckResult {
        let (value, se, ratio) = hutchinson_quadratic(1000, 8, o.seed)?;
        outcome(
            (value + 2.0).abs() <= 0.2 && (1.8..=2.2).contains(&ratio),
            format!("estimate {value:.4} (se {se:.4}), stderr ratio {ratio:.3}"),
        )
    }
}

pub mod tilt {
    use super::*;

    /// Observed `Delta_K / dt_K` at K = 100, 200, 400 for one frozen trajectory,
    /// where `Delta_K` is the largest gap among the three drift-free schemes.
    pub fn scheme_gaps(seed: u64, x0: f64) -> anyhow::Result<Vec<(usize, f64)>> {
        let path = problems::standard_1d();
        let rt = problems::look_ahead(&path, Reward::linear_uniform(0.5, 1), LookAhead::FlowMap, Tolerances::default())?;
        let fine: Vec<State> = (0..400).map(|k| standard_normal(&mut substream(seed, 0, k), 1)).collect();
        let mut out = Vec::new();
        for k in [100usize, 200, 400] {
            let m = 400 / k;
            let noises: Vec<State> = (0..k)
                .map(|j| fine[j * m..(j + 1) * m].iter().fold(State::zeros(1), |a, b| a + b) / (m as f64).sqrt())
                .collect();
            let states = simulate_path(&rt, DriftMultiplier::Default, &uniform_schedule(k), &dvector![x0], &noises)?;
            let mut rng = substream(seed, 1, k as u64);
            let totals: Vec<f64> = [
                WeightScheme::Simplified,
                WeightScheme::Laplacian(HutchinsonConfig::default()),
                WeightScheme::Expectation { samples: 1, paper_literal: false },
            ]
            .iter()
            .map(|s| log_weight_along(&rt, DriftMultiplier::Default, s, &states, &noises, &mut rng))
            .collect::<Result<_, _>>()?;
            let gap = (totals[0] - totals[1]).abs().max((totals[0] - totals[2]).abs()).max((totals[1] - totals[2]).abs());
            out.push((k, gap));
        }
        Ok(out)
    }

    /// True when the gaps at 200 and 400 stay within twice the slope observed at 100.
    pub fn gaps_consistent(gaps: &[(usize, f64)]) -> bool {
        let slope = gaps[0].1 * gaps[0].0 as f64;
        gaps[1..].iter().all(|(k, g)| *g <= 2.0 * slope / *k as f64)
    }

    pub fn scheme_consistency_check(o: &Options) -> CheckResult {
        let mut ok = true;
        let mut detail = Vec::new();
        for (i, x0) in [0.3, -1.0, 1.5].into_iter().enumerate() {
            let gaps = scheme_gaps(o.seed + i as u64, x0)?;
            ok &= gaps_consistent(&gaps);
            detail.push(format!("{:.1e}/{:.1e}/{:.1e}", gaps[0].1, gaps[1].1, gaps[2].1));
        }
        outcome(ok, format!("gaps at K=100/200/400: {}", detail.join(", ")))
    }

    pub fn shift_equivariance(o: &Options) -> CheckResult {
        let path = problems::two_mode_2d(0.0);
        let reward = problems::mode_two_reward(0.5);
        let rt = problems::look_ahead(&path, reward.clone(), LookAhead::FlowMap, run_tol())?;
        let shifted = rt.with_reward(reward.shifted(3.7));
        let times = uniform_schedule(20);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for p in 0..16u64 {
            let mut rng = substream(o.seed, 30, p);
            let x0 = standard_normal(&mut rng, 2);
            let noises: Vec<State> = (0..20).map(|_| standard_normal(&mut rng, 2)).collect();
            for (which, out) in [(&rt, &mut a), (&shifted, &mut b)] {
                let states = simulate_path(which, DriftMultiplier::Default, &times, &x0, &noises)?;
                out.push(log_weight_along(which, DriftMultiplier::Default, &WeightScheme::Simplified, &states, &noises, &mut rng)?);
            }
        }
        let (pa, pb) = (softmax(&a)?, softmax(&b)?);
        let worst = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        outcome(worst <= 1e-10, format!("max normalized-weight change {worst:.2e}"))
    }

    pub fn local_tilt_kernel(o: &Options) -> CheckResult {
        let path = problems::asymmetric_1d();
        let rt = problems::look_ahead(&path, Reward::linear_uniform(0.8, 1), LookAhead::FlowMap, o.tol())?;
        let mut worst = 0.0f64;
        for dt in [1e-2, 1e-3] {
            for (i, t) in [0.1, 0.5, 0.8].into_iter().enumerate() {
                let x = dvector![0.4 - i as f64 * 0.5];
                let noise = standard_normal(&mut substream(o.seed, 31, i as u64), 1);
                let tilted = LocalState::compute(&rt, DriftMultiplier::LocalTilt, t, &x)?.advance(dt, &noise)?;
                let plain = LocalState::compute(&rt, DriftMultiplier::Default, t, &x)?.advance(dt, &noise)?;
                let expected = rt.grad(t, &x)? * (dt * path.schedule().epsilon(t));
                worst = worst.max(((tilted - plain) - &expected).norm() / expected.norm());
            }
        }
        outcome(worst <= 1e-10, format!("max relative deviation of the mean shift {worst:.2e}"))
    }
}

pub mod smc {
    use super::*;

    /// Weight scheme paired with each drift multiplier.
    pub fn matching_scheme(chi: DriftMultiplier) -> WeightScheme {
        match chi {
            DriftMultiplier::Default => WeightScheme::Simplified,
            _ => WeightScheme::Laplacian(HutchinsonConfig { probes: 1, radius: 1e-3, kind: ProbeKind::Rademacher }),
        }
    }

    /// Per-run weighted means of `x` under `r = 0.5 x` on the standard pair.
    pub fn linear_tilt_means(chi: DriftMultiplier, runs: usize, particles: usize, steps: usize, seed: u64) -> anyhow::Result<Vec<f64>> {
        let path = fmtt_core::path::MixturePath::new(
            GaussianMixture::standard(1)?,
            GaussianMixture::standard(1)?,
            fmtt_core::schedule::InterpolantSchedule::linear().with_eta_offset(0.05),
        )?;
        let rt = problems::look_ahead(&Arc::new(path), Reward::linear_uniform(0.5, 1), LookAhead::FlowMap, run_tol())?;
        (0..runs)
            .map(|j| {
                let mut cfg = RunConfig::new(particles, steps, seed.wrapping_mul(1000).wrapping_add(j as u64));
                cfg.chi = chi;
                cfg.weights = matching_scheme(chi);
                Ok(engine::run(&cfg, &rt)?.expectation(|x| x[0])?)
            })
            .collect()
    }

    pub const ALL_CHI: [DriftMultiplier; 4] =
        [DriftMultiplier::Default, DriftMultiplier::TiltedScore, DriftMultiplier::LocalTilt, DriftMultiplier::Base];

    pub fn unbiased_across_chi_check(o: &Options) -> CheckResult {
        let mut ok = true;
        let mut detail = Vec::new();
        for chi in ALL_CHI {
            let (mean, se) = mean_stderr(&linear_tilt_means(chi, 16, 128, 200, o.seed)?);
            ok &= (mean - 0.5).abs() <= 3.0 * se;
            detail.push(format!("{chi:?} {mean:.4}+-{se:.4}"));
        }
        outcome(ok, detail.join(", "))
    }

    fn two_mode_run(reward: Reward, cfg: &RunConfig) -> anyhow::Result<RunResult> {
        let path = problems::two_mode_2d(0.0);
        let rt = problems::look_ahead(&path, reward, LookAhead::FlowMap, run_tol())?;
        Ok(engine::run(cfg, &rt)?)
    }

    pub fn softmax_invariance(o: &Options) -> CheckResult {
        let reward = problems::mode_two_reward(1.0);
        let mut cfg = RunConfig::new(64, 40, o.seed);
        cfg.resampling = Resampling::EssBelow(0.95);
        let a = two_mode_run(reward.clone(), &cfg)?;
        let b = two_mode_run(reward.shifted(-250.0), &cfg)?;
        let same_events = a.events.iter().map(|e| e.step).eq(b.events.iter().map(|e| e.step));
        let ea = a.expectation(|x| x[0])?;
        let eb = b.expectation(|x| x[0])?;
        let ess_gap = a.steps.iter().zip(&b.steps).map(|(p, q)| (p.ess - q.ess).abs()).fold(0.0, f64::max);
        outcome(
            same_events && a.ensemble.positions == b.ensemble.positions && (ea - eb).abs() <= 1e-12 && ess_gap <= 1e-12 * 64.0,
            format!("{} events, expectation gap {:.1e}, ESS gap {ess_gap:.1e}", a.events.len(), (ea - eb).abs()),
        )
    }

    pub fn flow_convergence(o: &Options) -> CheckResult {
        let base = problems::asymmetric_1d();
        let path = Arc::new(MixturePath::new(
            base.base().clone(),
            base.target().clone(),
            base.schedule().with_diffusion(Diffusion::Zero),
        )?);
        let rt = problems::look_ahead(&path, Reward::Zero, LookAhead::Naive, o.tol())?;
        let n = 32;
        let starts = path.base().sample(n, &mut substream(o.seed, INIT_STREAM, 0))?;
        let exact: Vec<State> = starts.iter().map(|x| rt.flow().flow_map(0.0, 1.0, x)).collect::<Result<_, _>>()?;
        let mut errs = Vec::new();
        for k in [25, 50, 100] {
            let mut cfg = RunConfig::new(n, k, o.seed);
            cfg.weights = WeightScheme::Ito;
            let out = engine::run(&cfg, &rt)?;
            let e: f64 = out.ensemble.positions.iter().zip(&exact).map(|(a, b)| (a - b).norm()).sum::<f64>() / n as f64;
            errs.push(e);
        }
        let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
        outcome(
            ratios.iter().all(|r| (1.7..=2.3).contains(r)),
            format!("mean errors {:.2e}/{:.2e}/{:.2e}, ratios {:.2}/{:.2}", errs[0], errs[1], errs[2], ratios[0], ratios[1]),
        )
    }

    pub fn base_dynamics(o: &Options) -> CheckResult {
        let mut cfg = RunConfig::new(32, 30, o.seed);
        cfg.resampling = Resampling::Never;
        cfg.chi = DriftMultiplier::Base;
        cfg.weights = WeightScheme::Ito;
        let tilted = two_mode_run(problems::mode_two_reward(1.0), &cfg)?;
        cfg.chi = DriftMultiplier::Default;
        let plain = two_mode_run(Reward::Zero, &cfg)?;
        outcome(tilted.ensemble.positions == plain.ensemble.positions, "terminal positions compared bit for bit")
    }

    pub fn zero_reward_weights(o: &Options) -> CheckResult {
        let mut cfg = RunConfig::new(32, 30, o.seed);
        cfg.clones = 3;
        cfg.weights = WeightScheme::Laplacian(HutchinsonConfig::default());
        let path = problems::gaussian_2d();
        let rt = problems::look_ahead(&path, Reward::Zero, LookAhead::Naive, run_tol())?;
        let out = engine::run(&cfg, &rt)?;
        let flat = out.ensemble.log_weights.iter().all(|a| *a == 0.0);
        let full = out.steps.iter().all(|s| s.ess == 96.0 && s.log_z == Some(0.0));
        outcome(flat && full && out.events.is_empty(), format!("{} events, final ESS {}", out.events.len(), out.steps.last().unwrap().ess))
    }

    pub fn thread_independence(o: &Options) -> CheckResult {
        let path = problems::two_mode_2d(0.0);
        let rt = problems::look_ahead(&path, problems::mode_two_reward(0.5), LookAhead::FlowMap, run_tol())?;
        let cfg = RunConfig::new(48, 30, o.seed);
        let serial = engine::run(&cfg, &rt)?;
        let pooled = run_with(&cfg, &rt, &Pool::new(3)?)?;
        let again = engine::run(&cfg, &rt)?;
        let same = |a: &RunResult, b: &RunResult| a.ensemble == b.ensemble && a.steps == b.steps && a.events == b.events;
        outcome(same(&serial, &pooled) && same(&serial, &again), "serial, three-thread and repeated runs compared bit for bit")
    }

    pub fn trivial_search(o: &Options) -> CheckResult {
        let mut cfg = RunConfig::new(32, 30, o.seed);
        cfg.resampling = Resampling::Never;
        let plain = two_mode_run(problems::mode_two_reward(0.5), &cfg)?;
        cfg.mode = Mode::Searching;
        let searched = two_mode_run(problems::mode_two_reward(0.5), &cfg)?;
        outcome(plain.ensemble.positions == searched.ensemble.positions, "C = 1 search without selections vs plain run")
    }
}

pub mod diagnostics {
    use super::*;

    pub fn zero_reward(o: &Options) -> CheckResult {
        let path = problems::two_mode_2d(0.0);
        let rt = problems::look_ahead(&path, Reward::Zero, LookAhead::FlowMap, run_tol())?;
        let out = engine::run(&RunConfig::new(32, 25, o.seed), &rt)?;
        let trace = DiscrepancyTrace::from_run(&out, DiscrepancySign::Consistent)?;
        let length = trace.thermodynamic_length().total();
        outcome(
            trace.increments.iter().all(|d| d.abs() <= 1e-10) && length.abs() <= 1e-10 && trace.quality_ratio().is_err(),
            format!("D = {:.1e}, Lambda = {length:.1e}, quality ratio undefined", trace.total()),
        )
    }

    pub fn two_particle(_: &Options) -> CheckResult {
        let d = incremental_discrepancy(&[1.0, 1.0], &[1.0, 3.0], DiscrepancySign::Consistent)?;
        let err = (d - 1.25f64.ln()).abs();
        outcome(err <= 1e-12, format!("D = {d:.15}, error {err:.1e}"))
    }

    fn bounded(trace: &DiscrepancyTrace) -> bool {
        let length = trace.thermodynamic_length().total();
        let q_ok = match trace.quality_ratio() {
            Ok(q) => q > 0.0 && q <= 1.0,
            Err(_) => trace.increments.iter().all(|d| *d <= 0.0),
        };
        q_ok && length <= trace.length_bound() * (1.0 + 1e-12)
    }

    pub fn trace_bounds(o: &Options) -> CheckResult {
        let mut traces = Vec::new();
        let path = problems::asymmetric_1d();
        for (reward, mode, scheme) in [
            (Reward::linear_uniform(1.0, 1), LookAhead::FlowMap, WeightScheme::Simplified),
            (Reward::linear_uniform(2.0, 1), LookAhead::Naive, WeightScheme::Laplacian(HutchinsonConfig::default())),
            (Reward::Quadratic { gamma: 0.5 }, LookAhead::Denoiser, WeightScheme::Ito),
        ] {
            let rt = problems::look_ahead(&path, reward, mode, run_tol())?;
            let mut cfg = RunConfig::new(64, 30, o.seed);
            cfg.weights = scheme;
            traces.push(DiscrepancyTrace::from_run(&engine::run(&cfg, &rt)?, DiscrepancySign::Consistent)?);
        }
        let mut rng = substream(o.seed, 40, 0);
        for _ in 0..200 {
            let k = rng.random_range(1..40);
            let d: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) - 0.05).collect();
            traces.push(DiscrepancyTrace::new(uniform_schedule(k), d, 1, 2)?);
        }
        let ok = traces.iter().all(bounded);
        outcome(ok, format!("{} traces (3 from runs)", traces.len()))
    }

    /// A synthetic run: one step of `n` particles with log-normal weights and increments.
    fn synthetic_run(n: usize, seed: u64, j: u64) -> RunResult {
        let mut rng = substream(seed, 41, j);
        let prev: Vec<f64> = (0..n).map(|_| 0.6 * standard_normal(&mut rng, 1)[0]).collect();
        let inc: Vec<f64> = (0..n).map(|_| 0.8 * standard_normal(&mut rng, 1)[0]).collect();
        let total: Vec<f64> = prev.iter().zip(&inc).map(|(a, b)| a + b).collect();
        let log_mean = |v: &[f64]| fmtt_core::smc::log_mean_weight(v).expect("finite weights");
        let record = |step: usize, log_w: &[f64]| StepRecord {
            step,
            t: step as f64,
            ess: ess(log_w).expect("finite weights"),
            resampled: false,
            log_z: Some(log_mean(log_w)),
            mean_reward: 0.0,
        };
        RunResult {
            ensemble: ParticleEnsemble { positions: vec![State::zeros(1); n], log_weights: total.clone(), clones: 1, generation: 0 },
            mode: Mode::Sampling,
            schedule: vec![0.0, 1.0],
            steps: vec![record(0, &prev), record(1, &total)],
            events: Vec::new(),
            increments: vec![IncrementLog { log_prev_weights: prev, log_increments: inc }],
        }
    }

    /// Pooled estimates over `J` runs of `n` particles against single runs of `J n`
    /// particles on independent streams; with previous-step weighting the pooled
    /// estimate also equals the single-run estimate on the concatenated ensemble.
    pub fn pooled_vs_single(o: &Options) -> CheckResult {
        let (batches, per_batch, n) = (24, 8, 64);
        let (mut single, mut pooled, mut gap) = (Vec::new(), Vec::new(), 0.0f64);
        for b in 0..batches {
            let runs: Vec<RunResult> = (0..per_batch).map(|j| synthetic_run(n, o.seed, (b * per_batch + j) as u64)).collect();
            let p = DiscrepancyTrace::from_runs(&runs, EstimatorOptions::default())?.total();
            let mut joined = runs[0].clone();
            for r in &runs[1..] {
                joined.increments[0].log_prev_weights.extend_from_slice(&r.increments[0].log_prev_weights);
                joined.increments[0].log_increments.extend_from_slice(&r.increments[0].log_increments);
            }
            gap = gap.max((DiscrepancyTrace::from_run(&joined, DiscrepancySign::Consistent)?.total() - p).abs());
            pooled.push(p);
            let fresh = synthetic_run(n * per_batch, o.seed, 100_000 + b as u64);
            single.push(DiscrepancyTrace::from_run(&fresh, DiscrepancySign::Consistent)?.total());
        }
        let (ms, ss) = mean_stderr(&single);
        let (mp, sp) = mean_stderr(&pooled);
        let combined = (ss * ss + sp * sp).sqrt();
        outcome(
            (ms - mp).abs() < 3.0 * combined && gap <= 1e-12,
            format!("single {ms:.4}+-{ss:.4}, pooled {mp:.4}+-{sp:.4}, concatenation gap {gap:.1e}"),
        )
    }

    pub fn constant_trace(_: &Options) -> CheckResult {
        let schedule = uniform_schedule(16);
        let trace = DiscrepancyTrace::new(schedule.clone(), vec![0.02; 16], 1, 128)?;
        let refined = trace.thermodynamic_length().refine(16)?;
        let zero = DiscrepancyTrace::new(schedule.clone(), vec![0.0; 16], 1, 128)?.thermodynamic_length().refine(16)?;
        outcome(
            refined.schedule == schedule && !refined.flat && zero.flat && zero.schedule == schedule,
            "constant and flat traces both return the input grid",
        )
    }

    /// Refinement wins over the uniform grid on the asymmetric problem, out of `pairs` seed pairs.
    pub fn refinement_wins(pairs: u64, seed: u64) -> anyhow::Result<(usize, Vec<(f64, f64)>)> {
        let path = problems::asymmetric_1d();
        let rt = problems::look_ahead(&path, Reward::linear_uniform(0.5, 1), LookAhead::Naive, run_tol())?;
        let k = 50;
        let mut cfg = RunConfig::new(256, k, seed.wrapping_add(1000));
        cfg.weights = WeightScheme::Laplacian(HutchinsonConfig::default());
        let pilot = DiscrepancyTrace::from_run(&engine::run(&cfg, &rt)?, DiscrepancySign::Consistent)?;
        let refined = pilot.thermodynamic_length().refine(k)?.schedule;
        let mut totals = Vec::new();
        for s in 0..pairs {
            cfg.seed = seed.wrapping_add(s);
            cfg.schedule = uniform_schedule(k);
            let a = DiscrepancyTrace::from_run(&engine::run(&cfg, &rt)?, DiscrepancySign::Consistent)?.total();
            cfg.schedule = refined.clone();
            let b = DiscrepancyTrace::from_run(&engine::run(&cfg, &rt)?, DiscrepancySign::Consistent)?.total();
            totals.push((a, b));
        }
        Ok((totals.iter().filter(|(a, b)| b < a).count(), totals))
    }

    pub fn refinement_check(o: &Options) -> CheckResult {
        let (wins, totals) = refinement_wins(10, o.seed)?;
        let (a, b) = totals.iter().fold((0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1));
        outcome(wins >= 8, format!("{wins}/10 wins, mean D {:.4} -> {:.4}", a / 10.0, b / 10.0))
    }

    /// Per-seed `(D, Lambda)` for flow-map, naive and denoiser look-aheads on the two-mode task.
    pub fn look_ahead_traces(seeds: u64, particles: usize, seed: u64) -> anyhow::Result<Vec<[(f64, f64); 3]>> {
        let path = problems::two_mode_2d(0.0);
        let reward = problems::mode_two_reward(0.1);
        let modes = [LookAhead::FlowMap, LookAhead::Naive, LookAhead::Denoiser];
        let rts: Vec<TimeDependentReward> =
            modes.iter().map(|m| problems::look_ahead(&path, reward.clone(), *m, run_tol())).collect::<Result<_, _>>()?;
        (0..seeds)
            .map(|s| {
                let mut row = [(0.0, 0.0); 3];
                for (slot, rt) in row.iter_mut().zip(&rts) {
                    let mut cfg = RunConfig::new(particles, 200, seed.wrapping_mul(1000).wrapping_add(s));
                    cfg.weights = if rt.is_exact_flow_map() {
                        WeightScheme::Simplified
                    } else {
                        WeightScheme::Laplacian(HutchinsonConfig::default())
                    };
                    let trace = DiscrepancyTrace::from_run(&engine::run(&cfg, rt)?, DiscrepancySign::Consistent)?;
                    *slot = (trace.total(), trace.thermodynamic_length().total());
                }
                Ok(row)
            })
            .collect()
    }

    /// One-sided sign-test p-value for `wins` successes out of `n`.
    pub fn sign_test(wins: usize, n: usize) -> f64 {
        let mut p = 0.0;
        for k in wins..=n {
            let mut c = 1.0;
            for i in 0..k {
                c *= (n - i) as f64 / (i + 1) as f64;
            }
            p += c;
        }
        p / 2f64.powi(n as i32)
    }

    /// Verdict and summary for the flow-map ordering over per-seed rows.
    pub fn ordering_verdict(rows: &[[(f64, f64); 3]]) -> (bool, String) {
        let n = rows.len();
        let mean = |m: usize, which: usize| {
            rows.iter().map(|r| if which == 0 { r[m].0 } else { r[m].1 }).sum::<f64>() / n as f64
        };
        let mut ok = true;
        let mut parts = Vec::new();
        for (other, name) in [(1, "naive"), (2, "denoiser")] {
            for (which, label) in [(0, "D"), (1, "Lambda")] {
                let wins = rows
                    .iter()
                    .filter(|r| if which == 0 { r[0].0 < r[other].0 } else { r[0].1 < r[other].1 })
                    .count();
                let p = sign_test(wins, n);
                ok &= mean(0, which) < mean(other, which) && p < 0.05;
                parts.push(format!("{label} vs {name}: {:.4} < {:.4}, {wins}/{n} p={p:.1e}", mean(0, which), mean(other, which)));
            }
        }
        (ok, parts.join("; "))
    }

    pub fn look_ahead_ordering_check(o: &Options) -> CheckResult {
        let rows = look_ahead_traces(16, 1024, o.seed)?;
        let (ok, detail) = ordering_verdict(&rows);
        outcome(ok, detail)
    }

    pub fn variance_model(_: &Options) -> CheckResult {
        let got = var_model(2.0, 4.0, 128.0);
        let want = (1.0 / 128.0) * ((0.5f64).exp() - 1.0) * 4.0 - 1.0;
        outcome(got == want, format!("var_model(2, 4, 128) = {got:.10}"))
    }
}

pub mod oracles {
    use super::*;

    pub fn snis_halving(o: &Options) -> CheckResult {
        let target = problems::two_mode_target();
        let reward = problems::mode_two_reward(0.5);
        let mut ratios = Vec::new();
        for s in 0..6 {
            let a = snis_tilted_expectation(&target, &reward, |x| x[0], 4000, &mut substream(o.seed, 50, s))?;
            let b = snis_tilted_expectation(&target, &reward, |x| x[0], 16000, &mut substream(o.seed, 51, s))?;
            ratios.push(a.stderr / b.stderr);
        }
        let (r, _) = mean_stderr(&ratios);
        outcome((1.8..=2.2).contains(&r), format!("mean stderr ratio {r:.3}"))
    }

    pub fn closed_form_vs_snis(o: &Options) -> CheckResult {
        let g2 = problems::gaussian_2d();
        let cases: Vec<(GaussianMixture, Reward)> = vec![
            (GaussianMixture::standard(1)?, Reward::linear_uniform(0.5, 1)),
            (problems::asymmetric_1d().target().clone(), Reward::Quadratic { gamma: 2.0 }),
            (g2.target().clone(), Reward::Linear(dvector![0.4, -0.7])),
            (g2.target().clone(), Reward::Quadratic { gamma: 0.8 }),
        ];
        let mut ok = true;
        let mut worst = 0.0f64;
        for (i, (target, reward)) in cases.into_iter().enumerate() {
            let tilt = TiltedOracle::new(target.clone(), reward.clone()).closed_form().ok_or_else(|| anyhow::anyhow!("no closed form"))?;
            for c in 0..target.dim() {
                let e = snis_tilted_expectation(&target, &reward, |x| x[c], 100_000, &mut substream(o.seed, 52, i as u64))?;
                let z = (e.estimate - tilt.mean[c]).abs() / e.stderr;
                worst = worst.max(z);
                ok &= z <= 3.0;
            }
        }
        outcome(ok, format!("largest deviation {worst:.2} standard errors"))
    }

    pub fn quadrature_vs_closed_form(_: &Options) -> CheckResult {
        let target = problems::asymmetric_1d().target().clone();
        let mut worst = 0.0f64;
        for reward in [Reward::linear_uniform(-1.3, 1), Reward::Quadratic { gamma: 0.7 }] {
            let tilt = TiltedOracle::new(target.clone(), reward.clone()).closed_form().expect("gaussian reward");
            let (log_z, mean) = quadrature_1d(&target, &reward, |x| x, 12.0, 4000)?;
            worst = worst.max((mean - tilt.mean[0]).abs()).max((log_z + tilt.log_normalizer).abs());
        }
        outcome(worst <= 1e-8, format!("max error {worst:.2e}"))
    }

    pub fn finite_differences(_: &Options) -> CheckResult {
        let lin = finite_diff_grad(|x| 1.5 * x[0] - 2.0 * x[1], &dvector![0.3, 4.0], 1e-3)?;
        let quad = finite_diff_grad(|x| -x.norm_squared() / 2.0, &dvector![1.0, 2.0], 1e-5)?;
        let flat = finite_diff_grad(|_| 7.0, &dvector![1.0, 2.0], 1e-5)?;
        let e1 = (lin - dvector![1.5, -2.0]).norm();
        let e2 = (quad - dvector![-1.0, -2.0]).norm();
        outcome(e1 <= 1e-10 && e2 <= 1e-8 && flat.norm() == 0.0, format!("affine {e1:.1e}, quadratic {e2:.1e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_resolve() {
        assert_eq!(select("flowmap").unwrap(), "flowmap");
        assert_eq!(select("interp").unwrap(), "interpolant-core");
        assert!(select("nothing").is_err());
        assert!(CHECKS.iter().all(|(s, _, _)| SUITES.contains(s)));
        for s in SUITES {
            assert!(CHECKS.iter().any(|(c, _, _)| *c == s), "{s} has no checks");
        }
    }

    #[test]
    fn sign_test_values() {
        assert!((diagnostics::sign_test(16, 16) - 1.0 / 65536.0).abs() < 1e-15);
        assert!(diagnostics::sign_test(12, 16) < 0.05);
        assert!(diagnostics::sign_test(11, 16) > 0.05);
        assert_eq!(diagnostics::sign_test(0, 16), 1.0);
    }

    #[test]
    fn fast_suites_pass() {
        let options = Options::default();
        for suite in ["interpolant-core", "flowmap", "oracles"] {
            let checks = run_suite(suite, &options);
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
            assert!(failed.is_empty(), "{failed:#?}");
        }
    }

    #[test]
    fn tight_tolerance_flow_map_checks() {
        let options = Options { rel_tol: 1e-12, ..Options::default() };
        for check in run_suite("flowmap", &options) {
            assert!(check.passed, "{check:#?}");
        }
    }
}
