//! Risk-bounded control of stochastic control-affine systems from noisy,
//! partial measurements.
//!
//! The crate chains four pieces that run once per control tick:
//!
//! 1. a continuous-time extended Kalman filter ([`estimator`]) tracks each
//!    uncertain agent from linear measurements,
//! 2. an exponential barrier over an inflated unsafe set ([`barrier`]) turns
//!    the filter's generator into one linear inequality in the input and a
//!    growth-rate variable `b`,
//! 3. a risk-budget condition on `(a, b)` caps the finite-horizon probability
//!    of entering the unsafe set,
//! 4. a small dense QP ([`qp`], assembled by [`controller`]) picks the input,
//!    with a heavily penalised slack so a least-risky input always exists.
//!
//! [`scenario`] wires these into a highway lane-change simulation and a
//! Monte Carlo risk estimator. Everything here is `no_std` + `alloc`; file
//! formats, campaigns and the CLI live in the companion `scbf` crate.

#![cfg_attr(not(test), no_std)]
#![warn(missing_debug_implementations)]
// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod barrier;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod noise;
pub mod qp;
pub mod scenario;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
