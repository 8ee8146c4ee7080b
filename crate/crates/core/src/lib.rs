//! Multilevel Monte Carlo estimation of gradients and Hessian-vector
//! products for robust optimal control of an elliptic PDE with a lognormal
//! random diffusion coefficient, together with sample-refreshing NCG and
//! Newton-CG optimizers.

pub mod error;
pub mod field;
pub mod grid;
pub mod harness;
pub mod mlmc;
pub mod optim;
pub mod pde;

pub use error::{Error, Result};
