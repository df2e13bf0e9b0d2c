pub mod blocks;
pub mod cost;
pub mod error;
pub mod harness;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
