pub mod checkpoint;
pub mod enhance;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod net;
pub mod retinex;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParameterStore, Tensor};
