pub mod cells;
pub mod checkpoint;
pub mod continual;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod numerics;
pub mod optim;
pub mod train;

pub use error::{Error, LoadError, Result};
