//! Double-precision neural building blocks: dense stacks, an LSTM cell with
//! BPTT, the dueling Q head, losses, Adam and finite-difference checking.

pub mod adam;
pub mod dense;
pub mod dueling;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use dense::{affine_forward, sigmoid, Activation, DenseParams, Dropout, Mlp};
pub use dueling::{dueling_forward, DuelingArch, DuelingParams};
pub use gradcheck::{grad_check, relative_error};
pub use loss::{clamp_prob, cross_entropy_with_logit, loss_cross_entropy};
pub use lstm::{lstm_step, lstm_unroll, LstmMasks, LstmParams};
pub use params::{add_weight_decay, clip_global_norm, weight_decay_penalty, Parameters};
pub use tensor::Tensor2;
