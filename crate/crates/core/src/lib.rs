pub mod attack;
pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod eval;
pub mod manipulator;
pub mod models;
pub mod stats;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
