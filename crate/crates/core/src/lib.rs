//! Online ensemble-transformer workload forecasting with a predictive
//! horizontal-pod-autoscaling simulator.

pub mod adapter;
pub mod backbone;
pub mod cli;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod representer;
pub mod series;
pub mod sim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
