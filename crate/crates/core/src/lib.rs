//! Federated-learning poisoning laboratory.
//!
//! A deterministic FL simulator for text classification with a suite of
//! distance/similarity-based robust aggregation rules and a graph-based
//! model poisoning attack that learns the structure of benign updates.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod grmp;
pub mod linalg;
pub mod model;
pub mod output;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
