//! Setwise contrastive neural topic model trained as a two-objective problem.
//!
//! The encoder receives a Pareto-balanced blend of the contrastive and ELBO
//! gradients; the decoder follows the ELBO alone.

pub mod augment;
pub mod corpus;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod moo;
pub mod ntm;
pub mod selftest;
pub mod setcl;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
