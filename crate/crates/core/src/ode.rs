//! Dormand–Prince 5(4) integration with PI step-size control.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rel_tol: 1e-8, abs_tol: 1e-10, max_steps: 100_000 }
    }
}

impl Tolerances {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Self {
        Self { rel_tol, abs_tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

/// Work counters of a finished solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;

/// Integrates `y' = f(t, y)` from `t0` to `t1` in place. `t1 < t0` runs the
/// same scheme with negative steps.
pub fn integrate<F>(mut f: F, t0: f64, t1: f64, y: &mut [f64], tol: &Tolerances) -> Result<SolveStats>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    tol.validate()?;
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(invalid("integration bounds must be finite"));
    }
    let mut stats = SolveStats::default();
    if t0 == t1 {
        return Ok(stats);
    }
    let n = y.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    f(t0, y, &mut k[0])?;
    stats.evaluations += 1;

    let mut h = initial_step(&mut f, t0, y, &k[0], dir, span, tol, &mut stage, &mut y_new)?;
    stats.evaluations += 1;

    let mut t = t0;
    let mut fac_old: f64 = 1e-4;
    let expo = 0.2 - PI_BETA * 0.75;
    let mut last_rejected = false;

    loop {
        if stats.accepted + stats.rejected >= tol.max_steps {
            return Err(Error::Tolerance { reached: t, max_steps: tol.max_steps });
        }
        let remaining = (t1 - t).abs();
        let mut last = false;
        if h.abs() >= remaining * (1.0 - 1e-12) {
            h = dir * remaining;
            last = true;
        }

        for i in 0..n {
            stage[i] = y[i] + h * A21 * k[0][i];
        }
        f(t + C2 * h, &stage, &mut k[1])?;
        for i in 0..n {
            stage[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
        }
        f(t + C3 * h, &stage, &mut k[2])?;
        for i in 0..n {
            stage[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        f(t + C4 * h, &stage, &mut k[3])?;
        for i in 0..n {
            stage[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        f(t + C5 * h, &stage, &mut k[4])?;
        for i in 0..n {
            stage[i] = y[i]
                + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
        }
        f(t + h, &stage, &mut k[5])?;
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
        let t_new = if last { t1 } else { t + h };
        f(t_new, &y_new, &mut k[6])?;
        stats.evaluations += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = tol.abs_tol + tol.rel_tol * y[i].abs().max(y_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::NonFinite);
        }

        let fac11 = err.powf(expo);
        if err <= 1.0 {
            stats.accepted += 1;
            let mut fac = fac11 / fac_old.powf(PI_BETA);
            fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            fac_old = err.max(1e-4);
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            t = t_new;
            if last {
                return Ok(stats);
            }
            let mut h_new = h / fac;
            if last_rejected {
                h_new = dir * h_new.abs().min(h.abs());
            }
            last_rejected = false;
            h = h_new;
        } else {
            stats.rejected += 1;
            last_rejected = true;
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Tolerance { reached: t, max_steps: tol.max_steps });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    f: &mut F,
    t0: f64,
    y: &[f64],
    f0: &[f64],
    dir: f64,
    span: f64,
    tol: &Tolerances,
    y1: &mut [f64],
    f1: &mut [f64],
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len();
    let mut dnf = 0.0;
    let mut dny = 0.0;
    for i in 0..n {
        let sk = tol.abs_tol + tol.rel_tol * y[i].abs();
        dnf += (f0[i] / sk).powi(2);
        dny += (y[i] / sk).powi(2);
    }
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { 0.01 * (dny / dnf).sqrt() };
    h = h.min(span);
    for i in 0..n {
        y1[i] = y[i] + dir * h * f0[i];
    }
    f(t0 + dir * h, y1, f1)?;
    let mut der2 = 0.0;
    for i in 0..n {
        let sk = tol.abs_tol + tol.rel_tol * y[i].abs();
        der2 += ((f1[i] - f0[i]) / sk).powi(2);
    }
    let der2 = der2.sqrt() / h;
    let der12 = der2.max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    Ok(dir * (100.0 * h).min(h1).min(span))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_decay() {
        let mut y = [1.0];
        let tol = Tolerances::new(1e-10, 1e-12);
        integrate(|_, y, dy| { dy[0] = -y[0]; Ok(()) }, 0.0, 2.0, &mut y, &tol).unwrap();
        assert_relative_eq!(y[0], (-2.0f64).exp(), max_relative = 1e-9);
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let tol = Tolerances::new(1e-11, 1e-13);
        let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0] + 0.1 * t.sin();
            Ok(())
        };
        let mut y = [0.3, -0.2];
        integrate(rhs, 0.0, 3.0, &mut y, &tol).unwrap();
        integrate(rhs, 3.0, 0.0, &mut y, &tol).unwrap();
        assert_relative_eq!(y[0], 0.3, epsilon = 1e-8);
        assert_relative_eq!(y[1], -0.2, epsilon = 1e-8);
    }

    #[test]
    fn equal_bounds_do_nothing() {
        let mut y = [4.0];
        let stats = integrate(|_, _, _| panic!("no evaluation expected"), 0.5, 0.5, &mut y, &Tolerances::default()).unwrap();
        assert_eq!(stats.evaluations, 0);
        assert_eq!(y[0], 4.0);
    }

    #[test]
    fn step_exhaustion_reports_partial_time() {
        let mut y = [1.0];
        let tol = Tolerances { rel_tol: 1e-12, abs_tol: 1e-14, max_steps: 3 };
        let err = integrate(|_, y, dy| { dy[0] = 50.0 * y[0].cos(); Ok(()) }, 0.0, 10.0, &mut y, &tol).unwrap_err();
        match err {
            Error::Tolerance { reached, max_steps } => {
                assert_eq!(max_steps, 3);
                assert!(reached > 0.0 && reached < 10.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tighter_tolerance_is_more_accurate() {
        let exact = (1.0f64).sin();
        let mut errs = alloc::vec::Vec::new();
        for rel in [1e-4, 1e-7, 1e-10] {
            let mut y = [0.0, 1.0];
            integrate(|_, y, dy| { dy[0] = y[1]; dy[1] = -y[0]; Ok(()) }, 0.0, 1.0, &mut y, &Tolerances::new(rel, rel * 1e-2)).unwrap();
            errs.push((y[0] - exact).abs());
        }
        assert!(errs[1] <= errs[0] && errs[2] <= errs[1], "{errs:?}");
    }
}
