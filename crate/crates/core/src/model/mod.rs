//! Backbone + adaptive SPP + head assembly, late fusion and checkpoint persistence.

mod checkpoint;
mod fusion;
mod network;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, StageTag,
    FORMAT_VERSION,
};
pub use fusion::{fuse, fused_cd_loss, learn_fusion_weight, FusionWeight};
pub use network::{
    BackboneConfig, ConvSpec, ForwardPass, HeadConfig, HeadVariant, Mode, Network, NetworkConfig,
    ParamSet, Prediction,
};
