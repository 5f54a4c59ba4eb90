//! Voxel eye incision simulator, PPO/GAIL curriculum trainer, demonstration
//! pipeline and adaptation metrics.

pub mod demo;
pub mod env;
pub mod error;
pub mod eval;
pub mod eye;
pub mod hash;
pub mod learn;
pub mod render;
pub mod tool;

pub use error::{Error, Result};
