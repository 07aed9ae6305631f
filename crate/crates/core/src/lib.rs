//! Sharpness-aware minimization on small, analyzable models.
//!
//! The crate covers the optimizer variants (SGD, shared-batch m-SAM, fresh-batch
//! n-SAM, full-batch 1-SAM and n-SAM), the hyperbolic-entropy implicit-bias
//! machinery for diagonal linear networks, m-sharpness measurement, and
//! empirical checks of descent lemmas and convergence rates on quadratics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convergence_lab;
pub mod datasets;
pub mod error;
pub mod exec;
pub mod implicit_bias;
pub mod io;
pub mod model_zoo;
pub mod optimizers;
pub mod rng;
pub mod sharpness;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model_zoo::{Objective, ParamVector};
