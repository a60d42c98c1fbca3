//! Dense `f64` tensors with tape-based reverse-mode differentiation, the
//! parameter store, AdamW and the seeded PRNG.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, weighted_sum, GradCheck};
pub use params::{AdamW, Bound, Param, ParamId, ParamStore, ParamTag};
pub use rng::{seeded, truncated_normal, uniform, Rng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
