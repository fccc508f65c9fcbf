//! Spatial confounding: simulation, closed-form bias, principal kriging bases,
//! spike-and-slab reduced-rank regression, competitor estimators and a
//! reproducible benchmark harness.

pub mod application;
pub mod basis;
pub mod bias;
pub mod competitors;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod simulator;
pub mod spatial;
pub mod ss_regression;
pub mod stats;

pub use error::{Error, Result};
