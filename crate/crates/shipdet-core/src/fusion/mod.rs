//! Desk-scale multimodal core: dual frozen visual backbones over an image
//! pyramid, channel fusion with a learned projection, a causal transformer
//! whose top layers carry low-rank attention adapters, per-linear bias/scale
//! deltas for the second tuning stage, answer-masked cross-entropy training,
//! and greedy decoding.

mod decode;
mod encoder;
mod model;
mod tokenizer;
mod train;

use alloc::string::String;

pub use decode::{decode_answer, AnswerSource, Decoded, ScriptEntry, ScriptedModel};
pub use encoder::{
    concat_scales, encode_image_multiscale, fuse_and_project, BackboneTag, EncoderStandIn,
    FeatureTokens,
};
pub use model::{
    assemble_multimodal, bias_scale_forward, BiasScaleLinear, LoraLinear, MultiModalSequence,
    ParamClass, Prepared, TensorMut, ToyModel, ToyModelConfig, TrainScope,
};
pub use tokenizer::{Tokenizer, EOS, SEP, UNK, VOCAB_SIZE};
pub use train::{
    dataset_loss, synthetic_detection_samples, train_stage, AdamW, Stage, TrainConfig, TrainRun,
    TrainSample,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FusionError {
    /// Dimension disagreement anywhere in the pipeline.
    ShapeMismatch(String),
    /// Training or loss called with no samples (or no supervised tokens).
    EmptyBatch,
    /// The assembled sequence exceeds the configured maximum.
    SequenceTooLong { len: usize, max: usize },
    /// Loss became non-finite during training.
    Divergence { step: usize },
}

impl core::fmt::Display for FusionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FusionError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            FusionError::EmptyBatch => f.write_str("empty batch"),
            FusionError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            FusionError::Divergence { step } => write!(f, "loss diverged at step {step}"),
        }
    }
}

impl core::error::Error for FusionError {}
