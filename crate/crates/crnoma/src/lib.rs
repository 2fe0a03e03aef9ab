//! Joint power and subcarrier allocation for a cooperative cognitive-relaying
//! multicarrier NOMA downlink.
//!
//! The crate provides a globally optimal polyblock solver, a penalty-based
//! successive convex approximation solver, two baseline schemes, a brute-force
//! oracle for tiny instances, and a Monte-Carlo harness.

pub mod baselines;
pub mod convex;
pub mod error;
pub mod harness;
pub mod instance;
pub mod monotonic;
pub mod rates;
pub mod sca;
pub mod solution;

mod textio;

pub use error::{Error, Result};
