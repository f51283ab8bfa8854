pub mod correspondence;
pub mod diffcore;
pub mod error;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod par;
pub mod policy;
pub mod simenv;
pub mod tensor;

pub use error::{HgmError, Result};
pub use tensor::Tensor;
