//! Decision-tree and random-forest learning instrumented for white-box
//! label-flipping poisoning research.
//!
//! The crate provides:
//!
//! - entropy-based decision tree training with deterministic split ordering
//!   ([`tree`]);
//! - per-node stability annotation and sub-tree retraining, which estimate
//!   the damage of a candidate label flip without retraining from scratch
//!   ([`annotation`]);
//! - random forests with hard majority voting and per-tree annotation
//!   ([`ensemble`]);
//! - seven label-flipping attack strategies, from exhaustive greedy search
//!   to score-ordered early stopping and black-box baselines ([`attacks`]);
//! - kNN-based data sanitization and hash-bagging robust training
//!   ([`defenses`]);
//! - metrics, grid search, and a reproducible experiment pipeline
//!   ([`harness`]).

pub mod annotation;
pub mod attacks;
pub mod config;
pub mod dataset;
pub mod defenses;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod tree;

pub(crate) mod space;

pub use dataset::{stratified_split, Dataset, Label, LabelCounts};
pub use error::{Error, Result};
