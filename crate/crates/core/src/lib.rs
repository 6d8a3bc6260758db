pub mod batch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fourier;
pub mod mask;
pub mod models;
pub mod nn;
pub mod real;
pub mod representation;
pub mod training;

pub use batch::ImageBatch;
pub use error::{CirlError, Result};
pub use models::{Backbone, CirlModel, ModelSpec};
pub use real::Real;
