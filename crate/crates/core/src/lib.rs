//! Online continual learning on small networks: a Kronecker-factored
//! natural-gradient optimizer, replay strategies, bias-correction tricks,
//! stream construction and an experiment harness.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); datasets,
//! streams and the harness work in `f64`.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod replay;
pub mod rng;
pub mod scalar;
pub mod stream;
pub mod tricks;

pub use error::{OclError, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Net = network::Network<f64>;
pub type Net32 = network::Network<f32>;
pub type Buffer = replay::ReplayBuffer<f64>;
pub type KfacOptimizer = optim::Kfac<f64>;
