pub mod config;
pub mod data;
pub mod error;
pub mod fora;
pub mod gcl;
pub mod gradcheck;
pub mod metrics;
pub mod msfa;
pub mod params;
pub mod rng;
pub mod segmenter;
pub mod tensor;
pub mod triadic;

pub use error::{CoreError, Result};
pub use tensor::{ComplexTensor, Gradients, Tape, Tensor, EPS_NUM};
