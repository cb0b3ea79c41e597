//! Streaming attention with rotary position encoding.

pub mod analysis;
pub mod bench;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod paradigm;
pub mod rope;
pub mod scalar;
pub mod stream;

pub use error::{Error, Result};
