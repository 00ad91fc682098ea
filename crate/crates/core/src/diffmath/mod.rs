//! Dense `f32`/`f64` tensor arithmetic with hand-written gradients and a
//! finite-difference checker.

mod grad;
mod linalg;
mod prob;
mod tensor;

pub use grad::{grad_check, GradientSet, Parameterized};
pub use linalg::{
    add, conv1x1, conv1x1_backward, matmul, matmul_backward, relu, relu_backward, scale,
    spatial_mean, spatial_mean_backward,
};
pub(crate) use linalg::gemm_acc;
pub use prob::{
    cross_entropy_from_logits, cross_entropy_with_grad, entropy, hellinger_sq, hellinger_sq_grad,
    kl_to_uniform, kl_to_uniform_from_logits, log_softmax, softmax, spatial_softmax,
    spatial_softmax_backward, HELLINGER_SQRT_FLOOR,
};
pub(crate) use prob::{entropy_unchecked, hellinger_sq_unchecked};
pub use tensor::Tensor;
