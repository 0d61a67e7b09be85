//! Federated-learning simulator for label-skewed clients with unreliable
//! participation. Implements FedAvg, FedProx, balanced-softmax FedAvg and
//! ReBaFL (relaxed balanced-softmax with prototype-based feature
//! augmentation) on a small from-scratch neural-network kernel.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod prototypes;
pub mod real;
pub mod rng;

pub use error::{Error, Result};
