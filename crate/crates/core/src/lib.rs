pub mod analysis;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod prompt;
pub mod world;

pub use error::{AirError, Result};
