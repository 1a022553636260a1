//! Block-split generative recommendation serving core.
//!
//! [`model`] holds the scoring network, [`cache`] the feature cache in front
//! of the remote store, [`staging`] the input packing and transfer model,
//! [`orchestrator`] the executor pool, and [`pipeline`] ties them together
//! into request handling.

// NaN must fail validation, so range checks are written `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod config;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod pipeline;
pub mod staging;
pub mod tensor;
