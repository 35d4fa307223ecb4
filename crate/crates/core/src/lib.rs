pub mod error;
pub mod geometry;
pub mod hand;
pub mod state;

pub use error::{Error, ErrorCategory, Result};
pub mod config;
pub mod dataset;
pub mod retarget;
pub mod par;
pub mod policy;
pub mod rollout;
pub mod signal;
pub mod train;
pub mod vae;
