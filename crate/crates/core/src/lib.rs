pub mod data;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod mlp;
pub mod noise;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, Rng};
