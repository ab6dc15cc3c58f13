//! Compressive privacy filtering for linear dynamical systems.

pub mod baselines;
pub mod cli;
pub mod central;
pub mod decentral;
pub mod ekf;
pub mod error;
pub mod instances;
pub mod lds;
pub mod linalg;
pub mod objectives;
pub mod scenario;

pub use error::{Error, Result};
pub use cli::cli_main;
