//! Reverse-mode differentiation for the learned primal-dual network and its losses.
//!
//! Activations and parameters use a generic [`Scalar`](crate::scalar::Scalar)
//! (f32 in training, f64 in gradient checks); losses and transport run in f64.

mod checkpoint;
mod loss;
mod net;
mod tape;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    OptimizerSnapshot, VERSION,
};
pub use loss::{
    loss_forward_backward, loss_value, mse_loss, ot_loss, LossGradient, LossKind, LossSpec,
    OutputLoss, PreparedLoss,
};
pub use net::{conv_block_forward, ConvBlockParams, ConvLayer, Forward, NetConfig, PrimalDualNet, INIT_STREAM};
pub use tape::{Shape, Tape, Tensor, Var};
