//! Plug-in Lee-Carter age-period and age-period-cohort mortality models.
//!
//! The crate computes exact mean and covariance structures of the plug-in
//! models, simulates mortality surfaces, fits the classical two-step
//! Lee-Carter procedure, and checks identifiability of the moment structure
//! by constructive moment inversion, explicit counterexamples and a
//! numerical equivalence search.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod estimate;
pub mod identify;
pub mod moments;
pub mod numeric;
pub mod params;
pub mod report;
pub mod simulate;
pub mod theorems;

pub use error::{Error, Result};
