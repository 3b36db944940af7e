//! Deep latent force models.
//!
//! Deep Gaussian processes whose layers are latent force models built on
//! first-order ODE Green's functions. Two inference schemes are provided:
//! a weight-space model over random Fourier response features
//! ([`rff`]) and an inducing-point model with pathwise samples mapped
//! through the convolution in closed form ([`vip`]).

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod rff;
pub mod training;
pub mod vip;

pub use error::{Error, Result};
