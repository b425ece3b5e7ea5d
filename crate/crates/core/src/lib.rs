//! Joint uplink/downlink bandwidth and power allocation for heterogeneous
//! networks with decoupled or coupled access.
//!
//! The pipeline is: [`scenario`] builds a network snapshot, [`association`]
//! binds users to base stations, [`model`] assembles the link coupling,
//! [`interference`] evaluates the demand and constraint functions, and
//! [`optimizer`] runs the three-step bandwidth/power scheme on top of the
//! fixed-point engine in [`sif`].

pub mod association;
pub mod campaign;
pub mod error;
pub mod interference;
pub mod model;
pub mod optimizer;
pub mod pf;
pub mod scenario;
pub mod sif;
pub mod units;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
