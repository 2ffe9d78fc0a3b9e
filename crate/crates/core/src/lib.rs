//! Predictive coding networks: prospective-configuration inference, local
//! learning, exact backprop and target-prop baselines, and closed-form
//! equilibria for linear networks.
//!
//! Activities, errors and datasets are matrices whose columns are samples.
//! Every sample relaxes independently; energies and gradients are summed over
//! columns.

pub mod analytic;
pub mod baselines;
pub mod data;
pub mod error;
pub mod inference;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod network;

pub use error::{PcnError, Result};
pub use inference::{ActivityState, ClampMode, InferenceSettings, InitMode, Objective};
pub use linalg::{Matrix, Vector};
pub use network::{build_network, forward_pass, ActivationKind, Network, NetworkSpec};
