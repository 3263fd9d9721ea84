//! Federated learning with heterogeneous privacy: clients either add
//! differential-privacy noise to their updates or opt out of it, and the
//! server combines the two groups with a tunable ratio. Includes the
//! personalization step, a Rényi-DP accountant, closed-form analysis of
//! the estimation setting, data generation and a round-based simulator.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod analytic;
pub mod datagen;
pub mod error;
pub mod model;
pub mod personalization;
pub mod privacy;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{ClientRecord, LabeledExamples, LocalDataset, LossKind, ModelVector};
