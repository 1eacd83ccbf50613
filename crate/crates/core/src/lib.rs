//! Pool-based active learning on synthetic data with ambiguous (confounded)
//! attributes, plus the analyses used to measure what uncertainty sampling
//! actually acquires.

pub mod acquisition;
pub mod al_loop;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod csvfmt;
pub mod datagen;
pub mod error;
pub mod model;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
