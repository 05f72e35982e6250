pub mod bench;
pub mod branches;
pub mod controller;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod risk;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Complex64, ComplexTensor2D, Tensor2D};
