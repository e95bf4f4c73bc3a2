use std::sync::Arc;

use super::{check_inputs, check_param, for_rows, InfluenceMode, InfluenceTable};
use crate::bench::counter::{record, OpKind};
use crate::error::{KpxError, Result};
use crate::sampling::NeighborTable;
use crate::tensor::{Backward, GradSink, Graph, Real, Tensor, Var};

/// Two-layer MLP producing `K × C_g` modulations from a center feature.
/// Channel `c` is gated by modulation `c / group_size`, so
/// `C_g = C / group_size`.
#[derive(Clone, Copy, Debug)]
pub struct ModulationHead {
    /// `[C × C]`
    pub w1: Var,
    pub b1: Option<Var>,
    /// `[C × K·C_g]`
    pub w2: Var,
    pub b2: Option<Var>,
    pub num_kernels: usize,
    pub group_size: usize,
    pub slope: f64,
}

pub(crate) fn groups_of(channels: usize, group_size: usize) -> Result<usize> {
    if group_size == 0 || channels % group_size != 0 {
        return Err(KpxError::Config(format!(
            "{channels} channels are not divisible into groups of {group_size}"
        )));
    }
    Ok(channels / group_size)
}

/// `sigmoid(leaky_relu(center·W1 + b1)·W2 + b2)`, shaped `[N × K·C_g]`.
pub fn generate_modulations<T: Real>(g: &mut Graph<T>, center: Var, head: &ModulationHead) -> Result<Var> {
    let c = g.value(center).row_len();
    let cg = groups_of(c, head.group_size)?;
    check_param("modulation", g.value(head.w1), &[c, c])?;
    check_param("modulation", g.value(head.w2), &[c, head.num_kernels * cg])?;
    let mut h = g.matmul(center, head.w1)?;
    if let Some(b) = head.b1 {
        h = g.add(h, b)?;
    }
    let h = g.leaky_relu(h, T::of(head.slope));
    let mut m = g.matmul(h, head.w2)?;
    if let Some(b) = head.b2 {
        m = g.add(m, b)?;
    }
    Ok(g.sigmoid(m))
}

/// Modulated depthwise convolution: each neighbor is weighted by
/// `h · (m_k* ⊙ w_k*)` with `m` generated from the query's center feature.
#[allow(clippy::too_many_arguments)]
pub fn kpconvx<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    center: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    w: Var,
    head: &ModulationHead,
) -> Result<Var> {
    let m = generate_modulations(g, center, head)?;
    kpconvx_with(g, x, m, table, infl, w, head.group_size)
}

/// [`kpconvx`] with externally supplied modulations `[N_q × K·C_g]`.
pub fn kpconvx_with<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    m: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    w: Var,
    group_size: usize,
) -> Result<Var> {
    modulated(g, x, m, Some(w), table, infl, group_size)
}

/// Involution: neighbors weighted by `h · m_k*` only.
pub fn kpinv<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    center: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    head: &ModulationHead,
) -> Result<Var> {
    let m = generate_modulations(g, center, head)?;
    kpinv_with(g, x, m, table, infl, head.group_size)
}

pub fn kpinv_with<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    m: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    group_size: usize,
) -> Result<Var> {
    modulated(g, x, m, None, table, infl, group_size)
}

fn modulated<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    m: Var,
    w: Option<Var>,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    group_size: usize,
) -> Result<Var> {
    let op = if w.is_some() { "kpconvx" } else { "kpinv" };
    let f = g.value(x);
    check_inputs(op, f, table, infl, InfluenceMode::Nearest)?;
    let c = f.row_len();
    let cg = groups_of(c, group_size)?;
    let kk = infl.num_kernels;
    let mstride = kk * cg;
    check_param(op, g.value(m), &[table.n_queries, mstride])?;
    if let Some(w) = w {
        check_param(op, g.value(w), &[kk, c])?;
    }
    let fd = f.data();
    let md = g.value(m).data();
    let wd = w.map(|w| g.value(w).data());
    let hw = table.width;
    let per = if w.is_some() { 3 * c } else { 2 * c } as u64;
    let mut out = vec![T::zero(); table.n_queries * c];
    let count = for_rows(&mut out, c, |i, orow| {
        let mut ops = 0;
        for s in i * hw..(i + 1) * hw {
            let j = table.indices[s];
            if j == table.shadow {
                continue;
            }
            let (h, k) = (infl.h[s], infl.k_star[s]);
            let mrow = &md[i * mstride + k * cg..i * mstride + (k + 1) * cg];
            let frow = &fd[j * c..(j + 1) * c];
            match wd {
                Some(wd) => {
                    let wrow = &wd[k * c..(k + 1) * c];
                    for (ch, (o, (&wv, &fv))) in orow.iter_mut().zip(wrow.iter().zip(frow)).enumerate() {
                        *o += (h * (mrow[ch / group_size] * wv)) * fv;
                    }
                }
                None => {
                    for (ch, (o, &fv)) in orow.iter_mut().zip(frow).enumerate() {
                        *o += (h * mrow[ch / group_size]) * fv;
                    }
                }
            }
            ops += per;
        }
        ops
    });
    record(if w.is_some() { OpKind::Kpconvx } else { OpKind::Kpinv }, count);
    let value = Tensor::new([table.n_queries, c], out)?;
    Ok(g.record(
        value,
        Box::new(ModulatedBack {
            x,
            m,
            w,
            table: table.clone(),
            infl: infl.clone(),
            group_size,
            cg,
        }),
    ))
}

struct ModulatedBack<T> {
    x: Var,
    m: Var,
    w: Option<Var>,
    table: Arc<NeighborTable>,
    infl: Arc<InfluenceTable<T>>,
    group_size: usize,
    cg: usize,
}

impl<T: Real> Backward<T> for ModulatedBack<T> {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.m];
        v.extend(self.w);
        v
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let fd = values[self.x.index()].data();
        let md = values[self.m.index()].data();
        let wd = self.w.map(|w| values[w.index()].data());
        let c = values[self.x.index()].row_len();
        let (kk, hw, cg, gs) = (self.infl.num_kernels, self.table.width, self.cg, self.group_size);
        let mstride = kk * cg;
        let want_x = sink.wants(self.x);
        let want_m = sink.wants(self.m);
        let want_w = self.w.is_some_and(|w| sink.wants(w));
        let mut gx = vec![T::zero(); if want_x { fd.len() } else { 0 }];
        let mut gm = vec![T::zero(); if want_m { md.len() } else { 0 }];
        let mut gw = vec![T::zero(); if want_w { kk * c } else { 0 }];
        let one = T::one();
        for (s, &j) in self.table.indices.iter().enumerate() {
            if j == self.table.shadow {
                continue;
            }
            let i = s / hw;
            let (h, k) = (self.infl.h[s], self.infl.k_star[s]);
            let mo = i * mstride + k * cg;
            for ch in 0..c {
                let gv = grad[i * c + ch];
                let fv = fd[j * c + ch];
                let mv = md[mo + ch / gs];
                let wv = wd.map_or(one, |wd| wd[k * c + ch]);
                if want_x {
                    gx[j * c + ch] += h * mv * wv * gv;
                }
                if want_m {
                    gm[mo + ch / gs] += h * wv * fv * gv;
                }
                if want_w {
                    gw[k * c + ch] += h * mv * fv * gv;
                }
            }
        }
        if want_x {
            sink.add(self.x, &gx);
        }
        if want_m {
            sink.add(self.m, &gm);
        }
        if let (true, Some(w)) = (want_w, self.w) {
            sink.add(w, &gw);
        }
    }
}
