//! Run configuration: a flat sectioned key-value file (TOML syntax) covering
//! model, fusion, mask, scheduler, and training settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskMode, MaskSpec, PrevContextCap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// Baseline: current utterance only.
    None,
    /// Concatenate previous utterances' input features before the encoder.
    InputConcat,
    /// Concatenate cached per-layer encoder embeddings into keys/values.
    EmbedConcat,
    /// Attention-pool each cached utterance to a fixed number of rows.
    Pooling,
    /// Embedding concatenation with chunked previous/current mask access.
    Chunked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub predictor_units: usize,
    pub vocab: usize,
    pub input_dim: usize,
    pub subsample_channels: usize,
    pub joint_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        // Desk defaults; the published large-scale setting (12 blocks,
        // 512-dim 8-head attention, kernel 15) lives in configs/large_scale.toml.
        Self {
            blocks: 4,
            d_model: 64,
            n_heads: 4,
            conv_kernel: 7,
            predictor_units: 32,
            vocab: 20,
            input_dim: 16,
            subsample_channels: 8,
            joint_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub method: FusionMethod,
    /// How many previous utterances the cache keeps (M).
    pub context_utterances: usize,
    /// Frame cap on previous context for the chunked method; 0 = unlimited.
    pub context_frames: usize,
    /// Pooled rows per previous utterance (L).
    pub pooled_rows: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            method: FusionMethod::None,
            context_utterances: 1,
            context_frames: 0,
            pooled_rows: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskModeConfig {
    NonStreaming,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub mode: MaskModeConfig,
    /// Chunk size in subsampled encoder frames.
    pub chunk_size: usize,
    /// Look-ahead in subsampled frames, rounded up to whole chunks.
    pub lookahead: usize,
    /// Left-context cap within the current utterance; omit for unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_left_cap: Option<usize>,
    /// Allow the chunked fusion method with a non-streaming mask.
    #[serde(default)]
    pub allow_non_streaming_chunked: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            mode: MaskModeConfig::NonStreaming,
            chunk_size: 3,
            lookahead: 0,
            current_left_cap: None,
            allow_non_streaming_chunked: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub rows: usize,
    pub capacity: usize,
    pub splicing: bool,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            rows: 3,
            capacity: 7,
            splicing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub training: TrainingSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse failure: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.blocks == 0 || m.d_model == 0 || m.n_heads == 0 {
            return Err(Error::Config("blocks, d_model, n_heads must be >= 1".into()));
        }
        if m.d_model % m.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                m.d_model, m.n_heads
            )));
        }
        if m.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel {} must be odd",
                m.conv_kernel
            )));
        }
        if m.vocab == 0 {
            return Err(Error::Config("vocab must be >= 1".into()));
        }
        if self.fusion.method == FusionMethod::Pooling && self.fusion.pooled_rows == 0 {
            return Err(Error::Config("pooled_rows must be >= 1".into()));
        }
        if self.mask.mode == MaskModeConfig::Streaming && self.mask.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1 in streaming mode".into()));
        }
        if self.fusion.method == FusionMethod::Chunked
            && self.mask.mode == MaskModeConfig::NonStreaming
            && !self.mask.allow_non_streaming_chunked
        {
            return Err(Error::Config(
                "chunked fusion requires a streaming mask (set mask.allow_non_streaming_chunked to override)"
                    .into(),
            ));
        }
        if self.scheduler.rows == 0 || self.scheduler.capacity == 0 {
            return Err(Error::Config("scheduler rows and capacity must be >= 1".into()));
        }
        Ok(())
    }

    /// Mask geometry for one utterance, given the previous utterances'
    /// subsampled frame lengths (empty when no context applies).
    pub fn mask_spec(&self, prev_lengths: Vec<usize>) -> MaskSpec {
        let mode = match self.mask.mode {
            MaskModeConfig::NonStreaming => MaskMode::NonStreaming,
            MaskModeConfig::Streaming => MaskMode::Streaming,
        };
        let prev_cap = if self.fusion.method == FusionMethod::Chunked && self.fusion.context_frames > 0
        {
            PrevContextCap::Frames(self.fusion.context_frames)
        } else {
            PrevContextCap::Unlimited
        };
        MaskSpec {
            mode,
            chunk_size: self.mask.chunk_size,
            lookahead: self.mask.lookahead,
            current_left_cap: self.mask.current_left_cap,
            prev_cap,
            prev_utterance_lengths: prev_lengths,
        }
    }
}
