pub mod bench;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod model;
pub mod quant;
pub mod sensitivity;
pub mod tensor_io;

pub use error::{Error, Result};
