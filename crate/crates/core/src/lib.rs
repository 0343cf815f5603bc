//! Aggregating bank-level loss models into fair industry models.

pub mod additive;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod population;
pub mod report;
pub mod sample;
pub mod scenarios;
pub mod simulation;

pub use error::{Error, Result};
