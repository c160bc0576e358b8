//! A minimal reverse-mode-differentiable 3D convolutional stack: tensors,
//! a recording tape, the residual encoder-decoder, Soft Dice loss, AdamW,
//! and finite-difference verification.

pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use model::{ModelConfig, NamedParam, ResUnet3d};
pub use optim::{adamw_step, lr_at_epoch, OptimConfig, OptimState};
pub use tape::{NodeId, Tape};
pub use tensor::{Element, Tensor};
