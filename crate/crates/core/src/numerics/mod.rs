//! Numerical building blocks shared by every model.

pub mod gradcheck;
pub mod linalg;
pub mod positive;
pub mod quadrature;
pub mod rng;
pub mod special;

pub use gradcheck::{grad_check, GradCheckReport};
pub use linalg::{psd_solve, Cholesky, Matrix};
pub use positive::{softplus, softplus_inv, PositiveParam};
pub use quadrature::{integrate, integrate_2d, QuadOptions};
pub use rng::{RngKey, RngStream};
pub use special::{erfc, erfcx, gauss_kl, log_normal_pdf};
