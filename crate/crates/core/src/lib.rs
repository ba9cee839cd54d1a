//! Conditional average treatment effects in a target population, estimated
//! from a randomized trial nested in a cohort sampled from that population.
//!
//! Estimation runs in two steps. Step one fits the nuisance models
//! (participation, treatment, and per-arm outcome regressions) and turns
//! every row into a doubly robust pseudo-outcome. Step two regresses the
//! pseudo-outcomes on a spline or polynomial basis of the effect modifier.
//! Pointwise intervals use the Huber-White sandwich; uniform bands over a
//! grid use an exponential-weight multiplier bootstrap that refits only the
//! second step.
//!
//! The [`simulate`] module provides data-generating processes with known
//! target-population CATE functions, used to validate the whole pipeline.

pub mod basis;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod glm;
pub mod inference;
mod linalg;
pub mod nuisance;
pub mod output;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod second_stage;
pub mod simulate;
pub mod stats;

use thiserror::Error;

pub use basis::{BasisConfig, BasisSpec, KnotRule};
pub use dataset::{CohortDataset, FoldAssignment, Schema};
pub use inference::UniformBand;
pub use nuisance::NuisancePredictions;
pub use pseudo::{PseudoOutcomes, PseudoVariant};
pub use second_stage::{CateFit, GridEvaluation};

/// Broad failure class, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Basis(#[from] basis::BasisError),
    #[error(transparent)]
    Glm(#[from] glm::GlmError),
    #[error(transparent)]
    Nuisance(#[from] nuisance::NuisanceError),
    #[error(transparent)]
    Pseudo(#[from] pseudo::PseudoError),
    #[error(transparent)]
    SecondStage(#[from] second_stage::SecondStageError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Simulate(#[from] simulate::SimulateError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Dataset(_) | Error::Csv(_) => ErrorCategory::Data,
            Error::Simulate(simulate::SimulateError::InvalidSpec(_)) => ErrorCategory::Config,
            Error::Basis(_)
            | Error::Glm(_)
            | Error::Nuisance(_)
            | Error::Pseudo(_)
            | Error::SecondStage(_)
            | Error::Inference(_)
            | Error::Simulate(_) => ErrorCategory::Numeric,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
