//! Dense `f64` tensors, the vector functions used for selection and scoring,
//! and a reverse-mode gradient trace.

pub mod ops;
mod tensor;
mod trace;

pub use ops::{
    cosine_similarity, kl_divergence, kl_divergence_logits, log_softmax_with_temperature, silu,
    softmax, softmax_with_temperature,
};
pub use tensor::Tensor;
pub use trace::{GradientTrace, Gradients, Var};

/// `d(output)/d(wrt)` for a scalar `output` recorded on `trace`.
pub fn gradient(trace: &GradientTrace, output: Var, wrt: Var) -> crate::Result<Tensor> {
    trace.gradient(output, wrt)
}
