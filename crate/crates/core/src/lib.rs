//! tensorforge: a layered tensor computing framework.

pub mod backend;
pub mod engine;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
