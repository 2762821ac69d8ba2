//! Dense float64 arrays and a reverse-mode differentiation tape.

mod array;
mod gradcheck;
mod tape;

pub use array::NdArray;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

/// Parameters keyed by stable name.
pub type ParamMap = std::collections::BTreeMap<String, NdArray>;

/// Epsilon inside every standardization denominator.
pub const STANDARDIZE_EPS: f64 = 1e-5;
