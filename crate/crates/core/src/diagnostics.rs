//! Incremental discrepancy, thermodynamic length and schedule refinement
//! computed from the weight logs of finished runs.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use crate::error::{invalid, Error, Result};
use crate::mixture::log_sum_exp;
use crate::smc::{validate_schedule, Mode, RunResult};

/// Sign of the `log g_0` term in the discrepancy estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscrepancySign {
    /// `log g_2 - 2 log g_1 + log g_0`; zero for constant increments.
    #[default]
    Consistent,
    /// `log g_2 - 2 log g_1 - log g_0`.
    PaperLiteral,
}

/// Which normalization estimate weights each run in the pooled estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunWeighting {
    /// `Z^(k-1, j)`, the estimate for the weights the moments are taken under.
    #[default]
    Previous,
    /// `Z^(k, j)`, which already contains the increment being measured.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimatorOptions {
    pub sign: DiscrepancySign,
    pub weighting: RunWeighting,
}

fn combine(log_g: [f64; 3], sign: DiscrepancySign) -> f64 {
    let [g0, g1, g2] = log_g;
    match sign {
        DiscrepancySign::Consistent => g2 - 2.0 * g1 + g0,
        DiscrepancySign::PaperLiteral => g2 - 2.0 * g1 - g0,
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension { expected: a, got: b });
    }
    if a < 2 {
        return Err(invalid("discrepancy needs at least two particles"));
    }
    Ok(())
}

/// `log sum_n w_n g_n^i` for `i = 0, 1, 2`, from log-weights and log-increments.
fn log_moments(log_prev: &[f64], log_inc: &[f64]) -> Result<[f64; 3]> {
    check_lengths(log_prev.len(), log_inc.len())?;
    if log_inc.iter().any(|l| !(l.is_finite())) {
        return Err(invalid("incremental weights must be positive and finite"));
    }
    if log_prev.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
        return Err(Error::NonFinite);
    }
    let mut out = [0.0; 3];
    let mut buf = Vec::with_capacity(log_prev.len());
    for (i, slot) in out.iter_mut().enumerate() {
        buf.clear();
        buf.extend(log_prev.iter().zip(log_inc).map(|(a, l)| a + i as f64 * l));
        *slot = log_sum_exp(&buf);
    }
    if out[0] == f64::NEG_INFINITY {
        return Err(Error::DegenerateEnsemble);
    }
    Ok(out)
}

/// `D_k` from previous weights `w` and increments `g` on the natural scale.
pub fn incremental_discrepancy(prev_weights: &[f64], increments: &[f64], sign: DiscrepancySign) -> Result<f64> {
    check_lengths(prev_weights.len(), increments.len())?;
    if increments.iter().any(|g| !(*g > 0.0)) {
        return Err(invalid("incremental weights must be positive"));
    }
    if prev_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(invalid("weights must be non-negative"));
    }
    let log_w: Vec<f64> = prev_weights.iter().map(|w| w.ln()).collect();
    let log_g: Vec<f64> = increments.iter().map(|g| g.ln()).collect();
    incremental_discrepancy_log(&log_w, &log_g, sign)
}

/// Log-space form of [`incremental_discrepancy`].
pub fn incremental_discrepancy_log(log_prev: &[f64], log_inc: &[f64], sign: DiscrepancySign) -> Result<f64> {
    Ok(combine(log_moments(log_prev, log_inc)?, sign))
}

/// Per-step discrepancy estimates for one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyTrace {
    pub schedule: Vec<f64>,
    /// Raw `D_k`, `k = 1..=K`; may be slightly negative at finite `N`.
    pub increments: Vec<f64>,
    pub runs: usize,
    pub particles: usize,
}

impl DiscrepancyTrace {
    pub fn new(schedule: Vec<f64>, increments: Vec<f64>, runs: usize, particles: usize) -> Result<Self> {
        validate_schedule(&schedule)?;
        if increments.len() + 1 != schedule.len() {
            return Err(Error::Dimension { expected: schedule.len() - 1, got: increments.len() });
        }
        if increments.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { schedule, increments, runs, particles })
    }

    /// Single-run estimate from the run's increment log.
    pub fn from_run(run: &RunResult, sign: DiscrepancySign) -> Result<Self> {
        if run.mode != Mode::Sampling {
            return Err(Error::Undefined("discrepancy of a search run"));
        }
        let increments = run
            .increments
            .iter()
            .map(|log| incremental_discrepancy_log(&log.log_prev_weights, &log.log_increments, sign))
            .collect::<Result<Vec<_>>>()?;
        Self::new(run.schedule.clone(), increments, 1, run.ensemble.len())
    }

    /// Pooled estimate over independent runs sharing one schedule; each run's
    /// self-normalized moments are weighted by its normalization estimate.
    pub fn from_runs(runs: &[RunResult], options: EstimatorOptions) -> Result<Self> {
        let first = runs.first().ok_or_else(|| invalid("no runs to pool"))?;
        if runs.iter().any(|r| r.mode != Mode::Sampling) {
            return Err(Error::Undefined("discrepancy of a search run"));
        }
        if runs.iter().any(|r| r.schedule != first.schedule) {
            return Err(invalid("pooled runs must share one schedule"));
        }
        let steps = first.increments.len();
        let mut increments = Vec::with_capacity(steps);
        let mut pooled: [Vec<f64>; 3] = Default::default();
        for k in 1..=steps {
            pooled.iter_mut().for_each(Vec::clear);
            for run in runs {
                let log = &run.increments[k - 1];
                let moments = log_moments(&log.log_prev_weights, &log.log_increments)?;
                let z_index = match options.weighting {
                    RunWeighting::Previous => k - 1,
                    RunWeighting::Current => k,
                };
                let log_z = run.log_z(z_index)?;
                for i in 0..3 {
                    pooled[i].push(log_z + moments[i] - moments[0]);
                }
            }
            let log_g = [log_sum_exp(&pooled[0]), log_sum_exp(&pooled[1]), log_sum_exp(&pooled[2])];
            increments.push(combine(log_g, options.sign));
        }
        Self::new(first.schedule.clone(), increments, runs.len(), first.ensemble.len())
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// `D(T) = sum_k D_k`.
    pub fn total(&self) -> f64 {
        self.increments.iter().sum()
    }

    fn clamped(&self) -> impl Iterator<Item = f64> + '_ {
        self.increments.iter().map(|d| d.max(0.0))
    }

    /// Cumulative `sum sqrt(max(D_k, 0))` at every knot.
    pub fn thermodynamic_length(&self) -> BarrierProfile {
        let mut knots = Vec::with_capacity(self.schedule.len());
        let mut acc = 0.0;
        knots.push((self.schedule[0], 0.0));
        for (t, d) in self.schedule[1..].iter().zip(self.clamped()) {
            acc += d.sqrt();
            knots.push((*t, acc));
        }
        BarrierProfile { knots }
    }

    /// `(sum sqrt D)^2 / (K sum D)`, in `(0, 1]` whenever defined.
    pub fn quality_ratio(&self) -> Result<f64> {
        let sum: f64 = self.clamped().sum();
        if !(sum > 0.0) {
            return Err(Error::Undefined("quality ratio with zero total discrepancy"));
        }
        let root: f64 = self.clamped().map(|d| d.sqrt()).sum();
        // Bounded by one; the min only absorbs rounding in the equality case.
        Ok((root * root / (self.steps() as f64 * sum)).min(1.0))
    }

    /// `sqrt(K sum D)`, an upper bound on the thermodynamic length.
    pub fn length_bound(&self) -> f64 {
        (self.steps() as f64 * self.clamped().sum::<f64>()).sqrt()
    }
}

/// Knots `(t_k, Lambda(t_k))` of the cumulative barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierProfile {
    pub knots: Vec<(f64, f64)>,
}

/// Output of [`BarrierProfile::refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub schedule: Vec<f64>,
    /// Set when the profile was flat and the input knots were returned.
    pub flat: bool,
}

impl BarrierProfile {
    pub fn total(&self) -> f64 {
        self.knots.last().map_or(0.0, |k| k.1)
    }

    pub fn times(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.0).collect()
    }

    /// Piecewise-linear inverse of the barrier at `level`.
    pub fn invert(&self, level: f64) -> f64 {
        let total = self.total();
        let tol = 1e-12 * total;
        if let Some(k) = self.knots.iter().find(|k| (k.1 - level).abs() <= tol) {
            return k.0;
        }
        let j = self.knots.partition_point(|k| k.1 < level);
        if j == 0 {
            return self.knots[0].0;
        }
        if j >= self.knots.len() {
            return self.knots[self.knots.len() - 1].0;
        }
        let (t0, l0) = self.knots[j - 1];
        let (t1, l1) = self.knots[j];
        t0 + (level - l0) / (l1 - l0) * (t1 - t0)
    }

    /// Equal-barrier schedule with `steps` intervals, `t_k = Lambda^{-1}(Lambda k / K)`.
    pub fn refine(&self, steps: usize) -> Result<Refinement> {
        if steps == 0 {
            return Err(invalid("refinement needs at least one step"));
        }
        if self.knots.len() < 2 || self.knots.windows(2).any(|w| !(w[0].0 < w[1].0) || w[1].1 < w[0].1) {
            return Err(invalid("barrier profile must have increasing times and a nondecreasing barrier"));
        }
        let total = self.total();
        if !(total > 0.0) {
            return Ok(Refinement { schedule: self.times(), flat: true });
        }
        let mut schedule = Vec::with_capacity(steps + 1);
        schedule.push(0.0);
        for k in 1..steps {
            schedule.push(self.invert(total * k as f64 / steps as f64));
        }
        schedule.push(1.0);
        validate_schedule(&schedule).map_err(|_| invalid("refined schedule is not strictly increasing"))?;
        Ok(Refinement { schedule, flat: false })
    }
}

/// Default number of refinement rounds.
pub const DEFAULT_REFINE_ROUNDS: usize = 3;

/// Alternates discrepancy estimation and refinement; returns every schedule
/// visited, starting with `initial`, alongside its trace.
pub fn refine_iteratively<F>(
    initial: Vec<f64>,
    rounds: usize,
    mut estimate: F,
) -> Result<Vec<(Vec<f64>, DiscrepancyTrace)>>
where
    F: FnMut(&[f64]) -> Result<DiscrepancyTrace>,
{
    validate_schedule(&initial)?;
    let steps = initial.len() - 1;
    let mut history = Vec::with_capacity(rounds + 1);
    let mut schedule = initial;
    for round in 0..=rounds {
        let trace = estimate(&schedule)?;
        let next = if round < rounds { Some(trace.thermodynamic_length().refine(steps)?) } else { None };
        history.push((schedule, trace));
        match next {
            Some(r) if !r.flat => schedule = r.schedule,
            _ => break,
        }
    }
    Ok(history)
}

/// The printed variance model `(1/N)(exp(D / R) - 1) R - 1`, evaluated as is.
pub fn var_model(total: f64, effective_resamples: f64, particles: f64) -> f64 {
    (1.0 / particles) * ((total / effective_resamples).exp() - 1.0) * effective_resamples - 1.0
}
