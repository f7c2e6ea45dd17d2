//! Dense tensor arithmetic with hand-written backward passes.
//!
//! Everything trainable in the crate is expressed with the contracts here:
//! 2-D row-major tensors, a handful of differentiable ops, seeded random
//! streams, and a central finite-difference verifier for the analytic
//! gradients.

mod gradcheck;
mod ops;
pub(crate) mod ops_internal {
    pub(crate) use super::ops::{gemm_acc, gemm_tn_acc, transpose_slice};
}
mod real;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, GradRecord, Gradients, GroupError, ParamStore};
pub use ops::{
    dropout, dropout_backward, matmul, matmul_backward, matmul_nt, matmul_tn, relu, relu_backward,
    softmax, softmax_backward, softmax_slice, tanh, transpose, DropoutMask,
};
pub use real::{DType, Real};
pub use rng::{derive_seed, seeded_rng, splitmix64, SeededRng};
pub use tensor::Tensor;
