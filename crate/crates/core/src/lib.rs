pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fft;
pub mod gin;
pub mod gradcheck;
pub mod gru;
pub mod gsl;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod s4;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
