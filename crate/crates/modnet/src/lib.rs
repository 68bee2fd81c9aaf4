//! Subnetwork structure probing and masked retraining for out-of-distribution
//! generalization, together with the biased dataset generators, OOD training
//! objectives, baselines and the linear-theory verifier used to study them.
//!
//! The crate is organized around a small deterministic CPU training substrate
//! ([`nn`]), biased multi-environment dataset construction ([`data`]),
//! probabilistic weight-mask machinery ([`mask`]), the four risk objectives
//! ([`objective`]), the three-stage modular-risk-minimization pipeline
//! ([`pipeline`]), a Monte-Carlo verifier for the sparse-vs-regular linear
//! classifier analysis ([`theory`]) and a config-driven experiment runner
//! ([`experiment`]).

pub mod data;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod scalar;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;
