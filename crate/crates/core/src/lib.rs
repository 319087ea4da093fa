//! Autonomous surrogate building for Darcy-flow and CO₂-plume data: data
//! generation, profiling, a model zoo, hyperparameter search, training,
//! closed-loop self-correction and reporting.

pub mod agents;
pub mod context;
pub mod control;
pub mod datagen;
pub mod error;
pub mod hpo;
pub mod pipeline;
pub mod profiling;
pub mod report;
pub mod training;
pub mod zoo;

pub use context::Qoi;
pub use error::{CoreError, Result};
