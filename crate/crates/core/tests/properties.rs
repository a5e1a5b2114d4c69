use std::sync::Arc;

use approx::assert_relative_eq;
use fmtt_core::diagnostics::{incremental_discrepancy_log, DiscrepancySign, DiscrepancyTrace};
use fmtt_core::flowmap::{gaussian_pair_closed_form, FlowMapEvaluator};
use fmtt_core::mixture::GaussianMixture;
use fmtt_core::ode::Tolerances;
use fmtt_core::oracles::finite_diff_grad;
use fmtt_core::path::MixturePath;
use fmtt_core::reward::{LookAhead, Reward, TimeDependentReward};
use fmtt_core::rng::substream;
use fmtt_core::schedule::InterpolantSchedule;
use fmtt_core::smc::{ess, resample_indices, softmax, weighted_expectation, Resampler};
use fmtt_core::State;
use nalgebra::{dvector, DMatrix, DVector};
use proptest::prelude::*;

fn paths() -> Vec<Arc<MixturePath>> {
    let sched = InterpolantSchedule::linear();
    let one = |t: GaussianMixture| Arc::new(MixturePath::new(GaussianMixture::standard(t.dim()).unwrap(), t, sched).unwrap());
    vec![
        one(GaussianMixture::standard(1).unwrap()),
        one(GaussianMixture::isotropic(dvector![3.0], 0.04).unwrap()),
        one(
            GaussianMixture::new(
                vec![0.3, 0.7],
                vec![dvector![-1.5], dvector![2.0]],
                vec![DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.5)],
            )
            .unwrap(),
        ),
        one(
            GaussianMixture::new(
                vec![0.5, 0.5],
                vec![dvector![-2.0, 0.0], dvector![2.0, 0.0]],
                vec![DMatrix::identity(2, 2) * 0.25, DMatrix::identity(2, 2) * 0.25],
            )
            .unwrap(),
        ),
        one(
            GaussianMixture::new(
                vec![0.4, 0.6],
                vec![dvector![-1.0, 0.5], dvector![1.5, -0.5]],
                vec![
                    DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                    DMatrix::from_row_slice(2, 2, &[0.2, -0.05, -0.05, 0.4]),
                ],
            )
            .unwrap(),
        ),
    ]
}

fn gaussian_pairs() -> Vec<Arc<MixturePath>> {
    let sched = InterpolantSchedule::linear();
    vec![
        Arc::new(MixturePath::new(GaussianMixture::standard(1).unwrap(), GaussianMixture::isotropic(dvector![1.0], 1.0).unwrap(), sched).unwrap()),
        Arc::new(
            MixturePath::new(
                GaussianMixture::gaussian(dvector![0.5, -0.5], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap(),
                GaussianMixture::gaussian(dvector![2.0, 1.0], DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.8])).unwrap(),
                sched,
            )
            .unwrap(),
        ),
    ]
}

fn point(path: &MixturePath, raw: [f64; 2]) -> State {
    DVector::from_iterator(path.dim(), raw.iter().copied().take(path.dim()))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_from_velocity(idx in 0usize..5, t in 0.0f64..0.99, raw in prop::array::uniform2(-3.0f64..3.0)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let dynamics = path.dynamics(t, &x).unwrap();
        for i in 0..x.len() {
            let implied = (t * dynamics.velocity[i] - x[i]) / (1.0 - t);
            prop_assert!(close(dynamics.score[i], implied, 1e-10), "{} vs {}", dynamics.score[i], implied);
        }
    }

    #[test]
    fn posterior_endpoints_interpolate(idx in 0usize..5, t in 0.0f64..=1.0, raw in prop::array::uniform2(-3.0f64..3.0)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let (x0, x1) = path.posterior_endpoints(t, &x).unwrap();
        let c = path.schedule().coefficients(t);
        let back = x0 * c.alpha + x1 * c.beta;
        prop_assert!((back - &x).norm() <= 1e-10 * (1.0 + x.norm()));
    }

    #[test]
    fn score_is_log_density_gradient(idx in 0usize..5, t in 0.0f64..=1.0, raw in prop::array::uniform2(-3.0f64..3.0)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let fd = finite_diff_grad(|y| path.log_density(t, y).unwrap(), &x, 1e-5).unwrap();
        let score = path.dynamics(t, &x).unwrap().score;
        prop_assert!((fd - &score).norm() <= 1e-6 * (1.0 + score.norm()));
    }

    #[test]
    fn continuity_equation(idx in 0usize..5, t in 0.02f64..0.98, raw in prop::array::uniform2(-3.0f64..3.0)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let h = 1e-5;
        let dt_log = (path.log_density(t + h, &x).unwrap() - path.log_density(t - h, &x).unwrap()) / (2.0 * h);
        let (b, grad_b) = path.velocity_with_gradient(t, &x).unwrap();
        let s = path.dynamics(t, &x).unwrap().score;
        let residual = dt_log + grad_b.trace() + b.dot(&s);
        prop_assert!(residual.abs() <= 1e-4, "residual {}", residual);
    }

    #[test]
    fn flow_map_agrees_with_closed_form(idx in 0usize..2, s in 0.0f64..=1.0, t in 0.0f64..=1.0, raw in prop::array::uniform2(-3.0f64..3.0)) {
        let path = &gaussian_pairs()[idx];
        let x = point(path, raw);
        let ev = FlowMapEvaluator::new(path.clone(), Tolerances::new(1e-10, 1e-12)).unwrap();
        let numeric = ev.flow_map(s, t, &x).unwrap();
        let exact = gaussian_pair_closed_form(path, s, t, &x).unwrap();
        prop_assert!((numeric - exact).norm() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn semigroup_and_inverse(idx in 0usize..5, times in prop::array::uniform3(0.0f64..=1.0), raw in prop::array::uniform2(-2.5f64..2.5)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let tol = Tolerances::new(1e-10, 1e-12);
        let ev = FlowMapEvaluator::new(path.clone(), tol).unwrap();
        let [s, t, u] = times;
        let mid = ev.flow_map(s, t, &x).unwrap();
        let two = ev.flow_map(t, u, &mid).unwrap();
        let direct = ev.flow_map(s, u, &x).unwrap();
        let scale = 1.0 + x.norm();
        prop_assert!((two - direct).norm() <= 10.0 * tol.rel_tol * scale * 10.0);
        let back = ev.flow_map(t, s, &mid).unwrap();
        prop_assert!((back - &x).norm() <= 10.0 * tol.rel_tol * scale * 10.0);
    }

    #[test]
    fn eulerian_identity(idx in 0usize..5, s in 0.05f64..0.95, raw in prop::array::uniform2(-2.5f64..2.5)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let ev = FlowMapEvaluator::new(path.clone(), Tolerances::new(1e-11, 1e-13)).unwrap();
        let h = 1e-4;
        let ds = (ev.flow_map(s + h, 1.0, &x).unwrap() - ev.flow_map(s - h, 1.0, &x).unwrap()) / (2.0 * h);
        let jac = ev.flow_map_jacobian(s, 1.0, &x).unwrap().jacobian;
        let b = path.velocity(s, &x).unwrap();
        prop_assert!((ds + jac * b).norm() <= 1e-4);
    }

    #[test]
    fn compounding_identity(idx in 0usize..5, t in 0.05f64..0.95, raw in prop::array::uniform2(-2.5f64..2.5)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let ev = FlowMapEvaluator::new(path.clone(), Tolerances::new(1e-11, 1e-13)).unwrap();
        let reward = if path.dim() == 1 {
            Reward::Quadratic { gamma: 0.7 }
        } else {
            Reward::LogResponsibility { mixture: Arc::new(path.target().clone()), component: 1, scale: 0.5 }
        };
        let rt = TimeDependentReward::new(reward, LookAhead::FlowMap, ev).unwrap();
        let look = rt.evaluate(t, &x).unwrap();
        let lhs = path.velocity(t, &x).unwrap().dot(&look.gradient) + rt.time_derivative(t, &x, 1e-4).unwrap();
        prop_assert!((lhs - look.terminal).abs() <= 1e-4, "{} vs {}", lhs, look.terminal);
    }

    #[test]
    fn tangent_identity_is_first_order(idx in 0usize..5, t in 0.05f64..0.9, raw in prop::array::uniform2(-2.5f64..2.5)) {
        let path = &paths()[idx];
        let x = point(path, raw);
        let ev = FlowMapEvaluator::new(path.clone(), Tolerances::new(1e-12, 1e-14)).unwrap();
        let b = path.velocity(t, &x).unwrap();
        let err = |h: f64| ((ev.flow_map(t, t + h, &x).unwrap() - &x) / h - &b).norm();
        let (coarse, fine) = (err(1e-2), err(5e-3));
        prop_assert!(fine <= 0.6 * coarse + 1e-9, "{} {}", coarse, fine);
    }
}

proptest! {
    #[test]
    fn softmax_invariance(logw in prop::collection::vec(-20.0f64..20.0, 2..40), shift in -500.0f64..500.0, seed in 0u64..1000) {
        let shifted: Vec<f64> = logw.iter().map(|a| a + shift).collect();
        prop_assert!(close(ess(&logw).unwrap(), ess(&shifted).unwrap(), 1e-12));
        let (p, q) = (softmax(&logw).unwrap(), softmax(&shifted).unwrap());
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let positions: Vec<State> = (0..logw.len()).map(|i| dvector![i as f64]).collect();
        let e1 = weighted_expectation(&positions, &logw, |x| x[0]).unwrap();
        let e2 = weighted_expectation(&positions, &shifted, |x| x[0]).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-12 * (1.0 + e1.abs()));
        for scheme in [Resampler::Systematic, Resampler::Multinomial] {
            let a = resample_indices(&logw, logw.len(), scheme, &mut substream(seed, 0, 0)).unwrap();
            let b = resample_indices(&shifted, logw.len(), scheme, &mut substream(seed, 0, 0)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn ess_is_bounded(logw in prop::collection::vec(-30.0f64..30.0, 1..60)) {
        let e = ess(&logw).unwrap();
        prop_assert!(e >= 1.0 - 1e-12 && e <= logw.len() as f64 + 1e-9);
    }

    #[test]
    fn discrepancy_is_nonnegative(logw in prop::collection::vec(-5.0f64..5.0, 2..30), scale in 0.0f64..3.0, seed in 0u64..100) {
        let n = logw.len();
        let mut rng = substream(seed, 0, 0);
        let logg: Vec<f64> = (0..n).map(|_| scale * (rand::Rng::random::<f64>(&mut rng) - 0.5)).collect();
        let d = incremental_discrepancy_log(&logw, &logg, DiscrepancySign::Consistent).unwrap();
        prop_assert!(d >= -1e-12);
    }

    #[test]
    fn trace_bounds(d in prop::collection::vec(0.0f64..0.5, 1..50)) {
        let k = d.len();
        let schedule: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
        let trace = DiscrepancyTrace::new(schedule, d.clone(), 1, 2).unwrap();
        let length = trace.thermodynamic_length();
        prop_assert!(length.total() <= trace.length_bound() * (1.0 + 1e-12) + 1e-15);
        if d.iter().sum::<f64>() > 0.0 {
            let q = trace.quality_ratio().unwrap();
            prop_assert!(q > 0.0 && q <= 1.0);
            let refined = length.refine(k).unwrap().schedule;
            prop_assert_eq!(refined[0], 0.0);
            prop_assert_eq!(refined[k], 1.0);
            prop_assert!(refined.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

#[test]
fn look_ahead_modes_agree_at_the_end() {
    for path in paths() {
        let ev = FlowMapEvaluator::new(path.clone(), Tolerances::default()).unwrap();
        let reward = Reward::LogResponsibility { mixture: Arc::new(path.target().clone()), component: 0, scale: 1.0 };
        let x = DVector::from_element(path.dim(), 0.4);
        let plain = reward.value(&x).unwrap();
        for mode in [LookAhead::Naive, LookAhead::Denoiser, LookAhead::FlowMap] {
            let rt = TimeDependentReward::new(reward.clone(), mode, ev.clone()).unwrap();
            assert_eq!(rt.eval(1.0, &x).unwrap(), plain);
        }
    }
}

#[test]
fn few_step_look_ahead_converges() {
    use fmtt_core::flowmap::StepScheme;
    let path = gaussian_pairs()[0].clone();
    let ev = FlowMapEvaluator::new(path.clone(), Tolerances::new(1e-11, 1e-13)).unwrap();
    let reward = Reward::linear_uniform(0.5, 1);
    let exact = TimeDependentReward::new(reward.clone(), LookAhead::FlowMap, ev.clone()).unwrap();
    let x = dvector![0.8];
    let target = exact.eval(0.3, &x).unwrap();
    let mut last = f64::INFINITY;
    for steps in [1, 2, 4, 8, 16, 32] {
        let rt = TimeDependentReward::new(reward.clone(), LookAhead::FlowMapSteps { steps, scheme: StepScheme::Heun }, ev.clone()).unwrap();
        let err = (rt.eval(0.3, &x).unwrap() - target).abs();
        assert!(err < last, "{steps}: {err} !< {last}");
        last = err;
    }
    assert_relative_eq!(last, 0.0, epsilon = 1e-4);
}
