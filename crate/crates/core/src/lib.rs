//! Sparsification of counterfactual explanations for tabular classifiers.
//!
//! The pipeline pairs factual rows with counterfactual rows ([`matcher`]),
//! attributes each pair's score change to original features with Shapley
//! values ([`attributor`]), and rebuilds every counterfactual from as few
//! feature changes as the model needs to keep the target class
//! ([`composer`]). [`generators`] produces candidate counterfactuals,
//! [`report`] and [`viz`] summarise a run.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attributor;
pub mod composer;
pub mod error;
pub mod generators;
pub mod matcher;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod schema;
pub mod viz;

pub use error::{Error, Result};
