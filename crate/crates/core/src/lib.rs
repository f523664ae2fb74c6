pub mod data;
pub mod diag;
pub mod error;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod seed;
pub mod ssat;
pub mod vit;

pub use error::{Error, Result};
