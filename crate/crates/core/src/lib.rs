//! Conditional-Gaussian latent surrogates for partially observed stochastic
//! systems, with closed-form filtering in the latent space.
//!
//! The crate is organised bottom-up: [`diffcore`] provides matrices, networks
//! and gradients; [`systems`] simulates the reference SDEs; [`models`] holds
//! the learnable surrogates; [`assimilation`] filters observations through
//! them; [`training`] fits them; [`eval`] scores them and drives the CLI.

// Validation compares with `!(x > 0.0)` and similar so that NaN fails.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assimilation;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod models;
pub mod systems;
pub mod training;

pub use error::{Error, Result};
