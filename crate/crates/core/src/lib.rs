pub mod beliefs;
pub mod discrete;
pub mod envs;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod inference;
pub mod planning;
pub mod rslds;
pub mod search;
mod tensor_json;

pub use error::{Error, Result};
