//! Feature generator, classifier and augmentation-transformer networks.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, MAGIC, VERSION,
};
pub use model::{forward_classify, forward_embedding, predict, Model, Param, ParamVars};
pub use spec::{fnv1a, Layer, NetworkSpec, Role, PHI_CHANNELS, TRANSFER_HIDDEN};
