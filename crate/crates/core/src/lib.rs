pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod forge;
mod fsutil;
pub mod localize;
pub mod losses;
pub mod netspec;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use fsutil::{write_atomic, write_json};
