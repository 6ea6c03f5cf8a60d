#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod hfl;
pub mod learners;
pub mod paillier;
pub mod seed;
pub mod secureboost;
pub mod transport;
pub mod vflr;

pub use error::{Error, Result};
