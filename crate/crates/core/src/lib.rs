//! Success probability of exploration for optimistic learners in chain MDPs.
//!
//! The crate pairs closed-form and approximate predictions ([`analytic`],
//! [`approx`]) with a seeded simulator of the Optimistic Prototype Strategy
//! ([`sim`]) so the two can be checked against each other, and builds
//! parameter advice ([`advisor`]) and batch experiments ([`experiment`]) on top.

// `!(x > 0.0)` guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisor;
pub mod analytic;
pub mod approx;
pub mod chain;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
