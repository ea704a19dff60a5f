pub mod ad;
pub mod context;
pub mod envs;
mod error;
pub mod harness;
pub mod mibench;
pub mod norm;
pub mod planner;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod worldmodel;

pub use error::{Error, Result};
