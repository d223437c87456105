pub mod error;
pub mod gating;
pub mod guided;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
