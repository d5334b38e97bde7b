pub mod autodiff;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod experiments;
pub mod lfam;
pub mod nn;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod workers;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
