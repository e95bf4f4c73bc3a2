use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{Block, BlockState, Builder, Linear, Norm, Run, RunMode, Transition};
use super::{build_contexts, ArchitectureConfig, Head, LayerContext, ParamAudit};
use crate::error::{KpxError, Result};
use crate::kernelgeo::{optimize_disposition, KernelDisposition};
use crate::kpops::kpconv_dense;
use crate::sampling::{grid_upsample, StackedCloud};
use crate::tensor::{Checkpoint, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug)]
struct HeadLayout {
    fc1: Linear,
    norm: Norm,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    fuse: Linear,
    norm: Norm,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ParamId,
    stem_norm: Norm,
    transitions: Vec<Option<Transition>>,
    blocks: Vec<Vec<Block>>,
    decoder: Vec<Decoder>,
    head: HeadLayout,
}

/// Encoder(-decoder) network with its parameters and kernel disposition.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ArchitectureConfig,
    pub kernel: KernelDisposition,
    pub store: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Builds a model, optimizing its kernel disposition from
    /// `config.kernel_seed` and initializing parameters from `seed`.
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let kernel = optimize_disposition(&config.shell_counts, config.conv_radius, config.kernel_seed)?;
        Self::with_kernel(config, kernel, seed)
    }

    pub fn with_kernel(config: ArchitectureConfig, kernel: KernelDisposition, seed: u64) -> Result<Self> {
        config.validate()?;
        if kernel.num_points() != config.num_kernel_points() {
            return Err(KpxError::Config(format!(
                "kernel has {} points, config expects {}",
                kernel.num_points(),
                config.num_kernel_points()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels_per_layer.clone();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            cfg: &config,
        };
        let stem = b.dense_kernel("stem.kernel", config.in_channels, ch[0]);
        let stem_norm = b.norm("stem.norm", ch[0]);
        let mut transitions = Vec::new();
        let mut blocks = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            transitions.push((l > 0).then(|| b.transition(&format!("enc{l}.pool"), ch[l - 1], c)));
            blocks.push(
                (0..config.blocks_per_layer[l])
                    .map(|i| b.block(&format!("enc{l}.block{i}"), c))
                    .collect(),
            );
        }
        let mut decoder = Vec::new();
        let head = match config.head {
            Head::Segmentation { classes } => {
                for l in 0..ch.len() - 1 {
                    decoder.push(Decoder {
                        fuse: b.linear(&format!("dec{l}.fuse"), ch[l + 1] + ch[l], ch[l]),
                        norm: b.norm(&format!("dec{l}.fuse_norm"), ch[l]),
                        blocks: (0..config.decoder_blocks_per_layer)
                            .map(|i| b.block(&format!("dec{l}.block{i}"), ch[l]))
                            .collect(),
                    });
                }
                let hid = config.seg_hidden;
                HeadLayout {
                    fc1: b.linear("head.fc1", ch[0], hid),
                    norm: b.norm("head.norm", hid),
                    fc2: b.linear("head.fc2", hid, classes),
                }
            }
            Head::Classification { classes } => {
                let hid = config.cls_hidden;
                HeadLayout {
                    fc1: b.linear("head.fc1", ch[ch.len() - 1], hid),
                    norm: b.norm("head.norm", hid),
                    fc2: b.linear("head.fc2", hid, classes),
                }
            }
        };
        Ok(Model {
            config,
            kernel,
            store,
            layout: Layout {
                stem,
                stem_norm,
                transitions,
                blocks,
                decoder,
                head,
            },
        })
    }

    pub fn contexts(&self, cloud: &StackedCloud) -> Result<Vec<LayerContext<T>>> {
        build_contexts(cloud, &self.config, &self.kernel)
    }

    /// Per-point logits (segmentation) or per-element logits
    /// (classification).
    pub fn forward(&mut self, g: &mut Graph<T>, cloud: &StackedCloud, mode: &mut RunMode<'_>) -> Result<Var> {
        let ctxs = self.contexts(cloud)?;
        self.forward_with(g, cloud, &ctxs, mode)
    }

    /// Forward pass reusing precomputed layer contexts.
    pub fn forward_with(
        &mut self,
        g: &mut Graph<T>,
        cloud: &StackedCloud,
        ctxs: &[LayerContext<T>],
        mode: &mut RunMode<'_>,
    ) -> Result<Var> {
        if cloud.channels != self.config.in_channels {
            return Err(KpxError::contract(format!(
                "model expects {} input channels, cloud has {}",
                self.config.in_channels, cloud.channels
            )));
        }
        if ctxs.len() != self.config.num_layers() {
            return Err(KpxError::contract("layer context count does not match the architecture"));
        }
        let feats: Vec<T> = cloud.features.iter().map(|&v| T::of(v)).collect();
        let x0 = g.constant(Tensor::new([cloud.len(), cloud.channels], feats)?);
        let layout = &self.layout;
        let mut run = Run {
            g,
            store: &mut self.store,
            cfg: &self.config,
            mode,
        };

        let c0 = &ctxs[0];
        let dense = c0
            .dense_influence
            .as_ref()
            .ok_or_else(|| KpxError::contract("first layer context lacks full-sum influences"))?;
        let w = run.param(layout.stem);
        let x = kpconv_dense(run.g, x0, &c0.neighbors, dense, w)?;
        let x = run.norm(x, &layout.stem_norm)?;
        let mut x = run.act(x);

        let mut skips = Vec::with_capacity(ctxs.len());
        for (l, ctx) in ctxs.iter().enumerate() {
            if let Some(t) = &layout.transitions[l] {
                x = run.transition(x, &ctxs[l - 1], t)?;
            }
            let mut s = BlockState::new(x);
            for b in &layout.blocks[l] {
                s = run.block(s, ctx, b)?;
            }
            x = s.low;
            skips.push(x);
        }

        let head = &layout.head;
        let feat = match self.config.head {
            Head::Segmentation { .. } => {
                for l in (0..ctxs.len() - 1).rev() {
                    let dec = &layout.decoder[l];
                    let pool = ctxs[l].pool.as_ref().expect("inner layers have a pool map");
                    let up = grid_upsample(run.g, x, pool)?;
                    let cat = run.g.concat_cols(up, skips[l])?;
                    let y = run.linear(cat, &dec.fuse)?;
                    let y = run.norm(y, &dec.norm)?;
                    let mut s = BlockState::new(run.act(y));
                    for b in &dec.blocks {
                        s = run.block(s, &ctxs[l], b)?;
                    }
                    x = s.low;
                }
                x
            }
            Head::Classification { .. } => {
                let last = &ctxs[ctxs.len() - 1];
                run.g.segment_mean(x, &last.lengths)?
            }
        };
        let y = run.linear(feat, &head.fc1)?;
        let y = run.norm(y, &head.norm)?;
        let y = run.act(y);
        run.linear(y, &head.fc2)
    }

    /// Runs encoder block `index` of `layer` on `x` (and the incoming high
    /// path of double-shortcut blocks). Returns the low and high outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn run_block(
        &mut self,
        g: &mut Graph<T>,
        ctx: &LayerContext<T>,
        layer: usize,
        index: usize,
        x: Var,
        high: Option<Var>,
        mode: &mut RunMode<'_>,
    ) -> Result<(Var, Option<Var>)> {
        let block = self
            .layout
            .blocks
            .get(layer)
            .and_then(|b| b.get(index))
            .ok_or_else(|| KpxError::contract(format!("no block {index} in layer {layer}")))?;
        let mut run = Run {
            g,
            store: &mut self.store,
            cfg: &self.config,
            mode,
        };
        let s = run.block(BlockState { low: x, high }, ctx, block)?;
        Ok((s.low, s.high))
    }

    /// Runs the strided transition from `ctxs[layer - 1]` into `layer`.
    pub fn run_transition(
        &mut self,
        g: &mut Graph<T>,
        ctxs: &[LayerContext<T>],
        layer: usize,
        x: Var,
        mode: &mut RunMode<'_>,
    ) -> Result<Var> {
        let t = self
            .layout
            .transitions
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or_else(|| KpxError::contract(format!("layer {layer} has no transition")))?;
        let mut run = Run {
            g,
            store: &mut self.store,
            cfg: &self.config,
            mode,
        };
        run.transition(x, &ctxs[layer - 1], t)
    }

    /// Logits of an eval-mode forward pass.
    pub fn predict(&mut self, cloud: &StackedCloud) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, cloud, &mut RunMode::eval())?;
        Ok(g.value(y).clone())
    }

    /// Trainable parameter counts by kind and by module.
    pub fn audit(&self) -> ParamAudit {
        ParamAudit::from_store(&self.store)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint(Some(self.config.to_toml()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.checkpoint().write_to(&mut f)?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint with an embedded config.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt = Checkpoint::read_from(&mut f)?;
        let text = ckpt
            .config
            .as_deref()
            .ok_or_else(|| KpxError::format(path, "checkpoint has no embedded config"))?;
        let cfg = ArchitectureConfig::from_toml(text)?;
        let mut model = Self::new(cfg, 0)?;
        model.store.load_checkpoint(&ckpt)?;
        Ok(model)
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}
