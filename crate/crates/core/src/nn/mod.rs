//! Building blocks of the segmentation network.

pub mod attention;
pub mod basic;
pub mod block;
pub mod ffn;
pub mod init;
pub mod patch;

pub use attention::{AttentionParams, ReductionMode};
pub use basic::{Conv2d, LayerNorm, Linear, LN_EPS};
pub use block::TransformerBlock;
pub use ffn::MixFfn;
pub use init::{ParamInit, INIT_STD};
pub use patch::{OverlapPatchEmbed, PatchExpand, PatchMerge, TokenGrid};
