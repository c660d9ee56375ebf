//! Partial domain adaptation on pre-extracted feature vectors.
//!
//! The pipeline estimates the target label distribution by black-box shift
//! estimation, builds a labeled sampling domain from within-class convex
//! combinations of source pairs, and aligns class-conditional feature
//! distributions across domains with a Sinkhorn-based independence criterion.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod etic;
pub mod eval;
pub mod labelshift;
pub mod linalg;
pub mod model;
pub mod par;
pub mod rng;
pub mod sampling;
pub mod synthetic;
pub mod trainer;

pub use dataset::{empirical_label_distribution, FeatureDataset, LabelDistribution, PdaTask};
pub use error::{Error, Result};
pub use rng::RandomSource;
