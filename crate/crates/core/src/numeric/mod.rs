//! Minimal dense numeric substrate: tensors, a Wengert tape for
//! reverse-mode gradients over the exact op set the matcher needs,
//! parameter storage, MLP building blocks, finite-difference checking,
//! and the binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{
    content_hash, file_content_hash, load_checkpoint, save_checkpoint, CheckpointHeader,
    FORMAT_VERSION,
};
pub use gradcheck::{grad_check, ClosureLoss, LossFn, ParamGrads};
pub use mlp::{linear_on_tape, mlp_forward, mlp_on_tape, register_mlp_params, MlpShape, ParamMap};
pub use params::{mix_seed, mix_seed_index, ParamStore};
pub use tape::{CorrelateGate, Gradients, Tape, VarId};
pub use tensor::{gelu, sigmoid, softmax, Scalar, Tensor2};
