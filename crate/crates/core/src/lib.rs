//! Fixed-time distributed convex optimization over switching graphs.

pub mod error;
pub mod graph;
pub mod mathkit;
pub mod objective;
pub mod protocol;
pub mod sim;

pub use error::{Error, Result};
