//! Reference forward pass of a block-split generative recommender.
//!
//! A user history is split into `num_blocks` contiguous sub-sequences. Each
//! block runs its own pre-norm Transformer stack over `[sub-sequence ‖
//! candidates]` under a mask that lets every candidate see the whole
//! sub-sequence and itself but no other candidate, so all candidates of a
//! request are scored in one pass. Block outputs are merged by an elementwise
//! sigmoid gate and fed to a multi-task MLP head.

mod attention;
mod config;
mod flops;
mod forward;
mod io;
mod mask;
mod params;
mod sequence;

pub use attention::{attention_naive, attention_tiled, AttentionKernel};
pub use config::ModelConfig;
pub use flops::{estimate_flops, FlopsBreakdown, FlopsEstimate};
pub use forward::{
    block_forward, expert_heads, gated_fusion, model_forward, model_forward_sequential, model_forward_with,
    ScoreMatrix, Workspace,
};
pub use io::{read_params, write_params, PARAMS_MAGIC, PARAMS_VERSION};
pub use mask::{AttentionMask, DenseMask, SumiMask};
pub use params::{BlockParams, ExpertParams, LayerParams, ModelParams};
pub use sequence::{split_sequence, TokenSequence};

pub(crate) use forward::forward_into;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of length {len} cannot be split into {blocks} equal blocks")]
    Indivisible { len: usize, blocks: usize },
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
