//! Attribute-level semantic prompt tuning for dual encoders.
//!
//! The pipeline builds a shared attribute vocabulary and per-category
//! descriptions ([`knowledge`]), weights those descriptions per image
//! ([`alignment`]), fuses them with label embeddings ([`enhancement`]) and
//! trains prompts plus a fusion MLP on seen categories ([`adapt`]).
//! [`bench`] holds the synthetic worlds and protocol runners.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod alignment;
pub mod bench;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod enhancement;
pub mod error;
pub mod knowledge;
pub mod numcore;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};

/// Version string embedded in every artifact.
pub const VERSION: &str = concat!("sempt-v", env!("CARGO_PKG_VERSION"));
