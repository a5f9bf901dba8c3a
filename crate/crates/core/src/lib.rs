pub mod agent;
pub mod checkpoint;
pub mod error;
pub mod evalx;
pub mod game;
pub mod numcore;
pub mod pipeline;
pub mod rng;
pub mod scenegen;
pub mod slotcoder;
pub mod trainer;

pub use error::{OceanError, Result};
