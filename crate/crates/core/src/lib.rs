//! Collaborative training of segmentation models across simulated
//! institutions: federated averaging, institutional incremental learning
//! (IIL), cyclic IIL and a pooled-data baseline, plus a framed TCP protocol
//! for running the federation across processes.

pub mod cohort;
pub mod dice;
pub mod error;
pub mod experiment;
pub mod models;
pub mod nn;
pub mod seed;
pub mod strategies;
pub mod wire;

pub use error::{Error, Result};
