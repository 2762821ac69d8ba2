pub mod backbone;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod numerics;
pub mod patching;
pub mod pipeline;
pub mod scm;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{NdArray, ParamMap, Tape, Var};
