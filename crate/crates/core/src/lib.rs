#![no_std]
//! Reward-tilted sampling and search for flow-based generative models.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diagnostics;
pub mod error;
pub mod flowmap;
pub mod mixture;
pub mod oracles;
pub mod ode;
pub mod path;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod smc;
pub mod tilt;

pub use error::{Error, Result};

/// A point in state space.
pub type State = nalgebra::DVector<f64>;
