//! Measuring and certifying the dynamical stability of SGD and GD at minima
//! of over-parameterized models.
//!
//! Sharpness is measured on the empirical Fisher matrix through its n×n Gram
//! matrix; stability is checked through necessary conditions, the exact
//! second-moment recursion of linearized SGD, and Monte-Carlo simulation.

pub mod data;
pub mod error;
pub mod experiments;
pub mod fisher;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod stability;

pub use error::{LabError, Result};
pub use models::{DiagNet, Model, ModelParams, ReluNet};
