pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod plot;
pub mod tensor;
pub mod training;

pub use error::{Result, TsdError};
