//! File formats, experiment runner and command-line front end for
//! `fedgrid-core`.

pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod run;
pub mod trace;

pub use error::{AppError, ErrorClass, Result};
