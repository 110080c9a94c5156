//! Desk-scale deterministic simulator for language-guided multi-task
//! federated learning.
//!
//! The crate implements the full protocol loop — per-site local training
//! of a small encoder/decoder multi-task network, language-guided channel
//! selection (LCS) on the sites, and language-guided hyper-aggregation
//! (LHA) on the server — together with the classic federated baselines
//! (FedAvg, FedAvg+Cluster, FedRep, FedProx, local-only), a synthetic
//! multi-site data generator, and the evaluation metrics (Dice, IoU,
//! RMSE, Δm).
//!
//! Everything is 64-bit floats with fixed reduction orders: a seeded run
//! is byte-reproducible.

pub mod adam;
pub mod data;
pub mod cli;
pub mod config;
pub mod error;
pub mod fed;
pub mod lcs;
pub mod lha;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod plot;
pub mod rng;
pub mod tape;
pub mod tdf;
pub mod text;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
