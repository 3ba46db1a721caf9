//! Deterministic simulator for federated domain generalization with
//! cross-client style mixing and dual-stage (representation and
//! prediction) alignment.

// `!(x >= 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod mixstyle;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
