//! Perceptually conditioned long-horizon video prediction on a synthetic
//! world with exact ground truth.

pub mod error;
pub mod flow_matching;
pub mod horizon;
pub mod io;
pub mod metrics;
pub mod model;
pub mod percept;
pub mod scheduler;
pub mod stats;
pub mod trainer;
pub mod world;

pub use error::{Error, ErrorClass, Result};
