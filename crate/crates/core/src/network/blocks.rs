use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{ArchitectureConfig, LayerContext, Operator};
use crate::error::{KpxError, Result};
use crate::kpops::{kpconvd, kpconvx, InfluenceTable, ModulationHead};
use crate::sampling::NeighborTable;
use crate::tensor::{batch_norm, Graph, ParamId, ParamKind, ParamStore, Real, RunningStats, Var};

/// How a forward pass treats normalization and DropPath. DropPath is
/// active only when an RNG is supplied.
pub struct RunMode<'a> {
    pub norm_training: bool,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> RunMode<'a> {
    pub fn eval() -> RunMode<'static> {
        RunMode {
            norm_training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        RunMode {
            norm_training: true,
            rng: Some(rng),
        }
    }
}

/// Per-element keep flags of one DropPath application.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropPathMask {
    pub keep: Vec<bool>,
}

/// Zeroes whole batch elements with probability `rate` and rescales the
/// kept ones by `1/(1 − rate)`. Identity without an RNG and without
/// `mask_in`, or when `rate` is 0.
pub fn droppath_apply<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    lengths: &[usize],
    rate: f64,
    rng: Option<&mut dyn RngCore>,
    mask_in: Option<&DropPathMask>,
) -> Result<(Var, DropPathMask)> {
    if lengths.iter().sum::<usize>() != g.value(x).rows() {
        return Err(KpxError::contract(format!(
            "droppath lengths {lengths:?} do not cover {} rows",
            g.value(x).rows()
        )));
    }
    let all_keep = DropPathMask {
        keep: vec![true; lengths.len()],
    };
    if rate == 0.0 {
        return Ok((x, all_keep));
    }
    let mask = match (mask_in, rng) {
        (Some(m), _) => m.clone(),
        (None, Some(rng)) => DropPathMask {
            keep: lengths.iter().map(|_| rng.random_bool(1.0 - rate)).collect(),
        },
        (None, None) => return Ok((x, all_keep)),
    };
    let scale = T::of(1.0 / (1.0 - rate));
    let factors = lengths
        .iter()
        .zip(&mask.keep)
        .flat_map(|(&n, &k)| std::iter::repeat_n(if k { scale } else { T::zero() }, n))
        .collect();
    Ok((g.scale_rows(x, factors)?, mask))
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadParams {
    pub w1: ParamId,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub head: Option<HeadParams>,
    pub group_size: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub conv: Conv,
    pub conv_norm: Norm,
    pub up: Linear,
    pub up_norm: Norm,
    pub down: Linear,
    pub down_norm: Norm,
}

/// Strided transition into a coarser layer.
#[derive(Clone, Debug)]
pub(crate) struct Transition {
    pub conv: Conv,
    pub conv_norm: Norm,
    pub linear: Linear,
    pub norm: Norm,
}

/// Creates named parameters with the default initialization.
pub(crate) struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub cfg: &'a ArchitectureConfig,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize, kind: ParamKind) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.store.add_uniform(name, shape, bound, kind, self.rng)
    }

    fn zeros(&mut self, name: String, n: usize, kind: ParamKind) -> ParamId {
        self.store.add(name, &[n], vec![T::zero(); n], kind)
    }

    pub fn linear(&mut self, name: &str, a: usize, b: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), &[a, b], a, ParamKind::Linear),
            b: Some(self.zeros(format!("{name}.b"), b, ParamKind::Linear)),
        }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), &[c], vec![T::one(); c], ParamKind::Norm),
            beta: self.zeros(format!("{name}.beta"), c, ParamKind::Norm),
            mean: self.zeros(format!("{name}.mean"), c, ParamKind::Buffer),
            var: self.store.add(format!("{name}.var"), &[c], vec![T::one(); c], ParamKind::Buffer),
        }
    }

    pub fn dense_kernel(&mut self, name: &str, cin: usize, cout: usize) -> ParamId {
        let k = self.cfg.num_kernel_points();
        self.uniform(format!("{name}.w"), &[k, cin, cout], k * cin, ParamKind::Kernel)
    }

    pub fn conv(&mut self, name: &str, c: usize) -> Conv {
        let k = self.cfg.num_kernel_points();
        let w = self.uniform(format!("{name}.w"), &[k, c], k, ParamKind::Kernel);
        let group_size = self.cfg.group_size(c);
        let head = (self.cfg.operator == Operator::Kpconvx).then(|| {
            let m = k * (c / group_size);
            let bias = self.cfg.modulation_bias;
            HeadParams {
                w1: self.uniform(format!("{name}.mod.w1"), &[c, c], c, ParamKind::Modulation),
                b1: bias.then(|| self.zeros(format!("{name}.mod.b1"), c, ParamKind::Modulation)),
                w2: self.uniform(format!("{name}.mod.w2"), &[c, m], c, ParamKind::Modulation),
                b2: bias.then(|| self.zeros(format!("{name}.mod.b2"), m, ParamKind::Modulation)),
            }
        });
        Conv { w, head, group_size }
    }

    pub fn block(&mut self, name: &str, c: usize) -> Block {
        let e = self.cfg.expansion * c;
        Block {
            conv: self.conv(&format!("{name}.conv"), c),
            conv_norm: self.norm(&format!("{name}.conv_norm"), c),
            up: self.linear(&format!("{name}.up"), c, e),
            up_norm: self.norm(&format!("{name}.up_norm"), e),
            down: self.linear(&format!("{name}.down"), e, c),
            down_norm: self.norm(&format!("{name}.down_norm"), c),
        }
    }

    pub fn transition(&mut self, name: &str, cp: usize, c: usize) -> Transition {
        Transition {
            conv: self.conv(&format!("{name}.conv"), cp),
            conv_norm: self.norm(&format!("{name}.conv_norm"), cp),
            linear: self.linear(&format!("{name}.linear"), cp, c),
            norm: self.norm(&format!("{name}.norm"), c),
        }
    }
}

/// Low- and high-width outputs carried between consecutive blocks. The
/// high path is only used by double-shortcut blocks.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockState {
    pub low: Var,
    pub high: Option<Var>,
}

impl BlockState {
    pub fn new(x: Var) -> Self {
        BlockState { low: x, high: None }
    }
}

/// Forward-pass helper bundling the graph, parameters and run mode.
pub(crate) struct Run<'a, 'b, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub cfg: &'a ArchitectureConfig,
    pub mode: &'a mut RunMode<'b>,
}

impl<T: Real> Run<'_, '_, T> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let w = self.param(l.w);
        let y = self.g.matmul(x, w)?;
        match l.b {
            Some(b) => {
                let b = self.param(b);
                self.g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn norm(&mut self, x: Var, n: &Norm) -> Result<Var> {
        let gamma = self.param(n.gamma);
        let beta = self.param(n.beta);
        let (mean, var) = self.store.pair_mut(n.mean, n.var);
        batch_norm(
            self.g,
            x,
            gamma,
            beta,
            RunningStats { mean, var },
            &self.cfg.norm,
            self.mode.norm_training,
        )
    }

    pub fn act(&mut self, x: Var) -> Var {
        self.g.leaky_relu(x, T::of(self.cfg.leaky_slope))
    }

    pub fn conv(
        &mut self,
        x: Var,
        center: Var,
        table: &Arc<NeighborTable>,
        infl: &Arc<InfluenceTable<T>>,
        conv: &Conv,
    ) -> Result<Var> {
        let w = self.param(conv.w);
        match &conv.head {
            None => kpconvd(self.g, x, table, infl, w),
            Some(h) => {
                let head = ModulationHead {
                    w1: self.param(h.w1),
                    b1: h.b1.map(|b| self.param(b)),
                    w2: self.param(h.w2),
                    b2: h.b2.map(|b| self.param(b)),
                    num_kernels: infl.num_kernels,
                    group_size: conv.group_size,
                    slope: self.cfg.leaky_slope,
                };
                kpconvx(self.g, x, center, table, infl, w, &head)
            }
        }
    }

    pub fn droppath(&mut self, x: Var, lengths: &[usize], mask: Option<&DropPathMask>) -> Result<(Var, DropPathMask)> {
        let rng: Option<&mut dyn RngCore> = match &mut self.mode.rng {
            Some(r) => Some(&mut **r),
            None => None,
        };
        droppath_apply(self.g, x, lengths, self.cfg.droppath_rate, rng, mask)
    }

    pub fn block(&mut self, s: BlockState, ctx: &LayerContext<T>, p: &Block) -> Result<BlockState> {
        let x = s.low;
        let c = self.conv(x, x, &ctx.neighbors, &ctx.influence, &p.conv)?;
        let c = self.norm(c, &p.conv_norm)?;
        let c = self.act(c);
        let u = self.linear(c, &p.up)?;
        let u = self.norm(u, &p.up_norm)?;
        if !self.cfg.double_shortcut {
            let u = self.act(u);
            let d = self.linear(u, &p.down)?;
            let d = self.norm(d, &p.down_norm)?;
            let (d, _) = self.droppath(d, &ctx.lengths, None)?;
            let y = self.g.add(x, d)?;
            return Ok(BlockState::new(self.act(y)));
        }
        let (du, mask) = self.droppath(u, &ctx.lengths, None)?;
        let h = match s.high {
            Some(xh) => self.g.add(xh, du)?,
            None => u,
        };
        let h = self.act(h);
        let d = self.linear(h, &p.down)?;
        let d = self.norm(d, &p.down_norm)?;
        let (d, _) = self.droppath(d, &ctx.lengths, Some(&mask))?;
        let y = self.g.add(x, d)?;
        Ok(BlockState {
            low: self.act(y),
            high: Some(h),
        })
    }

    /// Max-pools `x` into the next layer's points, adds a normalized
    /// strided convolution and projects to the next width.
    pub fn transition(&mut self, x: Var, prev: &LayerContext<T>, p: &Transition) -> Result<Var> {
        let (Some(pool), Some(table), Some(infl)) = (&prev.pool, &prev.strided_neighbors, &prev.strided_influence)
        else {
            return Err(KpxError::contract("transition from the last layer"));
        };
        let pooled = self.g.max_pool_rows(x, &pool.assign, pool.n_out)?;
        let c = self.conv(x, pooled, table, infl, &p.conv)?;
        let c = self.norm(c, &p.conv_norm)?;
        let u = self.g.add(pooled, c)?;
        let u = self.act(u);
        let y = self.linear(u, &p.linear)?;
        let y = self.norm(y, &p.norm)?;
        Ok(self.act(y))
    }
}
