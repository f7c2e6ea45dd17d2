pub mod audio;
pub mod datakit;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod numerics;
pub mod stacks;
pub mod training;

pub use error::{Error, Result};
