//! Desk-scale federated learning laboratory.
//!
//! Server-side impression synthesis with an augmented-Lagrangian / ADMM
//! objective, forgetting-penalized local training, FedAvg and FedProx
//! baselines, Dirichlet label-skew partitioning and forgetting diagnostics.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod impression;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod seeds;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use nn::{GradientSet, LayerSpec, Model};
pub use tensor::Tensor;
