pub mod capsules;
pub mod data;
pub mod error;
pub mod experiment;
pub mod group;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
