pub mod attacks;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod netcore;
pub mod objectives;
pub mod tape;

pub use error::{Error, Result};
