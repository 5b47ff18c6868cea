//! Dense tensors, reverse-mode gradients and the layers built on them.

pub mod gradcheck;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_params, GradcheckOptions, GradcheckReport};
pub use nn::{cosine, gru_sequence, masked_mean_rows, mha, mha_with_weights, GruParams, LayerNorm, Linear, MhaParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Grads, ParamId, Params, Tensor};
