//! Minimal dense-matrix engine: the handful of operations the encoder needs,
//! each with a hand-derived backward pass, plus the Adam optimizer.
//!
//! Everything trains in `f64`. Checkpoints store `f32`.

mod adam;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, Parameter};
pub use ops::{
    accumulate_bias_grad, accumulate_tn, add_row_bias, cross_entropy_from_logits, dropout,
    dropout_backward, layernorm_rows, layernorm_rows_backward, log_sum_exp, matmul,
    matmul_backward, matmul_nt, matmul_tn, relu, relu_backward, softmax_rows,
    softmax_rows_backward, DropoutMask, LayerNormCache,
};
pub(crate) use ops::{gemm, gemm_view, softmax_in_place};
pub use tensor::{NumericError, Tensor2};
