//! Reference problems shared by the verification suites and acceptance tests.

use std::sync::Arc;

use fmtt_core::flowmap::FlowMapEvaluator;
use fmtt_core::mixture::GaussianMixture;
use fmtt_core::ode::Tolerances;
use fmtt_core::path::MixturePath;
use fmtt_core::reward::{LookAhead, Reward, TimeDependentReward};
use fmtt_core::schedule::InterpolantSchedule;
use fmtt_core::Result;
use nalgebra::{dvector, DMatrix};

/// Integrator tolerances for sampling runs.
pub fn run_tol() -> Tolerances {
    Tolerances::new(1e-6, 1e-8)
}

fn pair(base: GaussianMixture, target: GaussianMixture, schedule: InterpolantSchedule) -> Arc<MixturePath> {
    Arc::new(MixturePath::new(base, target, schedule).expect("reference problems are valid"))
}

/// `N(0, 1) -> N(0, 1)`.
pub fn standard_1d() -> Arc<MixturePath> {
    pair(GaussianMixture::standard(1).unwrap(), GaussianMixture::standard(1).unwrap(), InterpolantSchedule::linear())
}

/// `N(0, 1) -> N(3, 0.04)`.
pub fn asymmetric_1d() -> Arc<MixturePath> {
    pair(
        GaussianMixture::standard(1).unwrap(),
        GaussianMixture::isotropic(dvector![3.0], 0.04).unwrap(),
        InterpolantSchedule::linear(),
    )
}

/// A correlated 2D Gaussian pair.
pub fn gaussian_2d() -> Arc<MixturePath> {
    pair(
        GaussianMixture::gaussian(dvector![0.5, -0.5], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap(),
        GaussianMixture::gaussian(dvector![2.0, 1.0], DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.8])).unwrap(),
        InterpolantSchedule::linear(),
    )
}

/// `0.5 N((-2, 0), 0.25 I) + 0.5 N((2, 0), 0.25 I)`.
pub fn two_mode_target() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.5],
        vec![dvector![-2.0, 0.0], dvector![2.0, 0.0]],
        vec![DMatrix::identity(2, 2) * 0.25, DMatrix::identity(2, 2) * 0.25],
    )
    .unwrap()
}

/// Standard normal to [`two_mode_target`], with the given `eta` offset.
pub fn two_mode_2d(eta_offset: f64) -> Arc<MixturePath> {
    pair(GaussianMixture::standard(2).unwrap(), two_mode_target(), InterpolantSchedule::linear().with_eta_offset(eta_offset))
}

/// A 1D two-component target with unequal weights and widths.
pub fn bimodal_1d() -> Arc<MixturePath> {
    pair(
        GaussianMixture::standard(1).unwrap(),
        GaussianMixture::new(
            vec![0.3, 0.7],
            vec![dvector![-1.5], dvector![2.0]],
            vec![DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.5)],
        )
        .unwrap(),
        InterpolantSchedule::linear(),
    )
}

/// `scale * log p(mode 2 | x)` under [`two_mode_target`].
pub fn mode_two_reward(scale: f64) -> Reward {
    Reward::LogResponsibility { mixture: Arc::new(two_mode_target()), component: 1, scale }
}

pub fn look_ahead(path: &Arc<MixturePath>, reward: Reward, mode: LookAhead, tol: Tolerances) -> Result<TimeDependentReward> {
    TimeDependentReward::new(reward, mode, FlowMapEvaluator::new(path.clone(), tol)?)
}
