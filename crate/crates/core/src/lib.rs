//! Federated anomaly detection for network flow records: an autoencoder
//! learns benign traffic, a softmax classifier reads its per-feature
//! reconstruction errors, and both are trained across simulated clients with
//! FedAvg-family fusion and a ring-passed global min-max scaler.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod fusion;
pub mod ingest;
pub mod matrix;
pub mod nn;
pub mod scaler;
pub mod transport;

pub use error::{Error, Result};
