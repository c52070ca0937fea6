//! Learned augmentation in embedding space for frozen-backbone transfer
//! learning.

pub mod augment;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod nn;
pub mod omega;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
