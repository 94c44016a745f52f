//! The full network: configuration, assembly, and persistence.

pub mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load_checkpoint, load_checkpoint_with, save_checkpoint};
pub use config::{ModelConfig, STAGES};
pub use network::{
    Bridge, BridgeBlock, BridgeLayout, Decoder, DecoderStage, Encoder, EncoderStage,
    FeaturePyramid, SegModel,
};

use crate::error::Result;
use crate::scalar::Scalar;

/// Fresh parameters for `config`, fully determined by `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<SegModel<T>> {
    SegModel::init(config, seed)
}
