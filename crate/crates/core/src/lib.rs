pub mod agents;
pub mod align;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod exec;
pub mod flowmatch;
pub mod latent;
pub mod pipeline;
pub mod remote;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
