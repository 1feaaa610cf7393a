//! Variance-reduced optimizers for K-level compositional stochastic
//! optimization, and a lab for measuring their stability and
//! generalization.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimators;
pub mod invariants;
pub mod optimizers;
pub mod problem;
pub mod report;
pub mod rng;
pub mod stability_lab;

pub use error::{Error, Result};
