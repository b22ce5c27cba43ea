//! A small decoder-only multimodal transformer with hand-written
//! reverse-mode gradients.
//!
//! The model conditions next-token prediction on a visual token sequence
//! taken from one pyramid scale, followed by a question. The same weights
//! accept every scale; only the prefix length changes.

mod checkpoint;
mod encoder;
mod params;
mod transformer;

pub use checkpoint::{
    read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, CheckpointHeader, TensorEntry,
};
pub use encoder::PixelImage;
pub use params::{Block, ModelConfig, ModelParams, ParamGroup};
