//! Differentially private aggregation of LLM ensemble outputs.
//!
//! The crate covers the noisy release primitives ([`mechanisms`]), privacy
//! accounting and noise calibration ([`accounting`]), the partition / prompt /
//! aggregate pipeline ([`aggregation`]), LLM backends ([`backend`]) and text
//! similarity metrics ([`metrics`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod aggregation;
pub mod backend;
mod hash;
pub mod mechanisms;
pub mod metrics;
pub mod normal;
pub mod text;
