//! Blocks, layer geometry and the encoder-decoder architectures.

mod audit;
mod blocks;
mod config;
mod context;
mod model;

pub use audit::ParamAudit;
pub use blocks::{droppath_apply, DropPathMask, RunMode};
pub use config::{channel_schedule, AllChannels, ArchitectureConfig, Groups, Head, Operator, PRESETS};
pub use context::{build_contexts, LayerContext};
pub use model::{softmax_rows, Model};
