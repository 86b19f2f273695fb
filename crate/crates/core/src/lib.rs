//! One-shot structured pruning of Vision Transformer MLP hidden channels and
//! attention query/key dimensions, with closed-form compensation folded into
//! the retained weights.
//!
//! Pipeline: [`calib::collect_stats`] streams activation moments and per-head
//! Grams over an unlabeled calibration set, [`rank`] picks the kept channels,
//! [`compensate`] fits the ridge and Sylvester solutions and folds them, and
//! [`prune::prune_model`] drives the whole pass.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod calib;
pub mod cli;
pub mod compensate;
pub mod config;
pub mod data;
pub mod fixture;
pub mod linalg;
pub mod prune;
pub mod rank;
pub mod tensorfile;
pub mod vit;

pub use compensate::{CompensationReport, SiteReport};
pub use config::{PruneConfig, Ranking};
pub use linalg::Matrix;
pub use prune::{prune_model, PruneError, PruneOutcome};
pub use vit::{VitConfig, VitModel};
