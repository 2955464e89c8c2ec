//! Dense arithmetic, the seeded generator and the differentiation machinery.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{
    central_difference, compare_gradients, finite_diff_grad, GradCheckReport, REL_ERROR_FLOOR,
};
pub use matrix::{dot, Matrix};
pub use rng::Rng;
pub use tape::{log_sum_exp, Gradients, Tape, Var};
