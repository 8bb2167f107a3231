//! Dense numerics shared by every other module: distribution matrices, the
//! activation and normalization primitives, the tiny target language model,
//! and the finite-difference oracle used to validate hand-written backward
//! passes.

mod gradcheck;
mod lm;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_rel_error, rel_error};
pub use lm::{
    cross_entropy_upstream, lm_backward, lm_backward_logits, lm_forward, LmCache, LmDims, TinyLM,
    PAD_ID,
};
pub use ops::{
    cross_entropy_rows, gelu, gelu_grad, gelu_scalar, layer_norm_vec, perplexity, softmax_row,
    LN_EPS, LOG_CLAMP,
};
pub use params::{xavier_bound, GradStore, ParamSet, ParamTensor};
pub use tensor::{OneHotLabels, ProbMatrix, Target, TokenSeq, ROW_SUM_TOL};
