//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset handling, training, attacks, defenses and the
/// experiment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },

    #[error("label column has {count} distinct values, expected at most 2: {values:?}")]
    TooManyLabels { count: usize, values: Vec<String> },

    #[error("positive label value {positive:?} not found among label values {values:?}")]
    PositiveLabelMissing { positive: String, values: Vec<String> },

    #[error("instance index {index} out of range for dataset of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("split fraction {0} outside (0, 1)")]
    InvalidFraction(f64),

    #[error("entropy of empty counts is undefined")]
    EmptyCounts,

    #[error("cannot train on an empty region")]
    EmptyRegion,

    #[error("stale annotation: {0}")]
    StaleAnnotation(String),

    #[error("flip index {0} not in the tree's root train set")]
    FlipOutsideTree(usize),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("not enough target-class instances: need {need}, have {have}")]
    NotEnoughTargets { need: usize, have: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tag an error with the experiment pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
