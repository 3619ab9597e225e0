pub mod detector;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod models;
pub mod regularizer;
pub mod replay;
pub mod runner;
pub mod tensor;
pub mod warp;
pub mod worlds;

pub use error::{Error, Result};
