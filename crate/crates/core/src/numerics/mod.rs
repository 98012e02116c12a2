//! Dense arithmetic, losses, optimizer step and gradient verification.

mod gradcheck;
mod loss;
mod rng;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use loss::{mse, softmax_cross_entropy, softmax_mse, softmax_rows};
pub use rng::Rng;
pub use tensor::{l2_distance, matmul, mean_rows, sgd_step, Tensor2D};
