//! Desk-scale laboratory for model-based offline reinforcement learning in
//! interactive recommendation.

pub mod agent;
pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod penalty;
pub mod pipeline;
pub mod theory;
pub mod user_model;

pub use error::{Error, Result};
