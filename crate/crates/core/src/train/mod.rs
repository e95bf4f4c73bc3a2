//! Optimization, losses, augmentation, synthetic data and evaluation.

mod augment;
mod fit;
mod loss;
mod metrics;
mod optim;
mod synth;

pub use augment::{augment, rotate_about, AugmentationConfig};
pub use fit::{
    evaluate_voting, make_batch, micro_step, train_loop, Batch, EpochLog, Evaluation, TrainConfig, TrainReport,
};
pub use loss::cross_entropy;
pub use metrics::{ConfusionMatrix, Metrics};
pub use optim::{lr_schedule, AdamW, OptimizerConfig};
pub use synth::{input_features, synth_generate, Dataset, Sample, SyntheticSpec, Task, PRIMITIVES};

/// Seed of an independent RNG stream identified by `parts`.
pub fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}
