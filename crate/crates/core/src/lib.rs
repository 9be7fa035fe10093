pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod error;
pub mod losses;
pub mod models;
pub mod optim;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
