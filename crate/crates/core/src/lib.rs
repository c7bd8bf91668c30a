pub mod coord;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod train;

pub use data::Subspace;
pub use error::{Error, Result};
