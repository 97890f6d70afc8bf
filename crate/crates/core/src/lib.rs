pub mod bench;
pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod grouped;
pub mod model;
pub mod nsa;
pub mod planner;
pub mod prompts;
pub mod tree;

pub use config::NsaConfig;
pub use error::{Error, Result};
