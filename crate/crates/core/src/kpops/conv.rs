use std::sync::Arc;

use super::{check_inputs, check_param, for_rows, InfluenceMode, InfluenceTable};
use crate::bench::counter::{record, OpKind};
use crate::error::Result;
use crate::sampling::NeighborTable;
use crate::tensor::{Backward, GradSink, Graph, Real, Tensor, Var};

/// Rigid kernel point convolution with full kernel summation.
/// `w` is `[K × C_in × C_out]`.
pub fn kpconv_dense<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    w: Var,
) -> Result<Var> {
    let f = g.value(x);
    check_inputs("kpconv", f, table, infl, InfluenceMode::FullSum)?;
    let cin = f.row_len();
    let kk = infl.num_kernels;
    let wt = g.value(w);
    if wt.shape().len() != 3 || wt.shape()[0] != kk || wt.shape()[1] != cin {
        return Err(crate::KpxError::Shape {
            op: "kpconv",
            lhs: wt.shape().to_vec(),
            rhs: vec![kk, cin],
        });
    }
    let cout = wt.shape()[2];
    let (n, hw) = (table.n_queries, table.width);
    let kc = kk * cin;

    // a[i, k, c] = Σ_j h_ijk f_j[c]
    let mut a = vec![T::zero(); n * kc];
    let fd = f.data();
    let mut count = for_rows(&mut a, kc, |i, arow| {
        let mut ops = 0;
        for s in 0..hw {
            let j = table.indices[i * hw + s];
            if j == table.shadow {
                continue;
            }
            let frow = &fd[j * cin..(j + 1) * cin];
            let hrow = &infl.h[(i * hw + s) * kk..(i * hw + s + 1) * kk];
            for (k, &h) in hrow.iter().enumerate() {
                for (o, &v) in arow[k * cin..(k + 1) * cin].iter_mut().zip(frow) {
                    *o += h * v;
                }
            }
            ops += kc as u64;
        }
        ops
    });
    let wd = wt.data();
    let mut out = vec![T::zero(); n * cout];
    count += for_rows(&mut out, cout, |i, orow| {
        let arow = &a[i * kc..(i + 1) * kc];
        for (p, &av) in arow.iter().enumerate() {
            for (o, &wv) in orow.iter_mut().zip(&wd[p * cout..(p + 1) * cout]) {
                *o += av * wv;
            }
        }
        (kc * cout) as u64
    });
    record(OpKind::KpconvDense, count);
    let value = Tensor::new([n, cout], out)?;
    Ok(g.record(
        value,
        Box::new(DenseBack {
            x,
            w,
            table: table.clone(),
            infl: infl.clone(),
            a,
            cin,
            cout,
        }),
    ))
}

struct DenseBack<T> {
    x: Var,
    w: Var,
    table: Arc<NeighborTable>,
    infl: Arc<InfluenceTable<T>>,
    a: Vec<T>,
    cin: usize,
    cout: usize,
}

impl<T: Real> Backward<T> for DenseBack<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let n = self.table.n_queries;
        let kk = self.infl.num_kernels;
        let kc = kk * self.cin;
        if sink.wants(self.w) {
            let gw = sink.buf(self.w);
            crate::tensor::gemm_tn(n, kc, self.cout, &self.a, grad, gw);
        }
        if sink.wants(self.x) {
            let wd = values[self.w.index()].data();
            let mut ga = vec![T::zero(); n * kc];
            crate::tensor::gemm_nt(n, self.cout, kc, grad, wd, &mut ga);
            let hw = self.table.width;
            let cin = self.cin;
            let gx = sink.buf(self.x);
            for i in 0..n {
                let garow = &ga[i * kc..(i + 1) * kc];
                for s in 0..hw {
                    let j = self.table.indices[i * hw + s];
                    if j == self.table.shadow {
                        continue;
                    }
                    let hrow = &self.infl.h[(i * hw + s) * kk..(i * hw + s + 1) * kk];
                    let gxrow = &mut gx[j * cin..(j + 1) * cin];
                    for (k, &h) in hrow.iter().enumerate() {
                        for (o, &v) in gxrow.iter_mut().zip(&garow[k * cin..(k + 1) * cin]) {
                            *o += h * v;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise kernel point convolution summing over every kernel point.
/// `w` is `[K × C]`.
pub fn kpconvd_fullsum<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    w: Var,
) -> Result<Var> {
    let f = g.value(x);
    check_inputs("kpconvd_fullsum", f, table, infl, InfluenceMode::FullSum)?;
    let c = f.row_len();
    let kk = infl.num_kernels;
    check_param("kpconvd_fullsum", g.value(w), &[kk, c])?;
    let (fd, wd) = (f.data(), g.value(w).data());
    let hw = table.width;
    let mut out = vec![T::zero(); table.n_queries * c];
    let count = for_rows(&mut out, c, |i, orow| {
        let mut ops = 0;
        for s in 0..hw {
            let j = table.indices[i * hw + s];
            if j == table.shadow {
                continue;
            }
            let frow = &fd[j * c..(j + 1) * c];
            let hrow = &infl.h[(i * hw + s) * kk..(i * hw + s + 1) * kk];
            for (k, &h) in hrow.iter().enumerate() {
                let wrow = &wd[k * c..(k + 1) * c];
                for ((o, &wv), &fv) in orow.iter_mut().zip(wrow).zip(frow) {
                    *o += h * wv * fv;
                }
            }
            ops += (2 * kk * c) as u64;
        }
        ops
    });
    record(OpKind::KpconvdFullsum, count);
    let value = Tensor::new([table.n_queries, c], out)?;
    Ok(g.record(
        value,
        Box::new(FullSumBack {
            x,
            w,
            table: table.clone(),
            infl: infl.clone(),
        }),
    ))
}

struct FullSumBack<T> {
    x: Var,
    w: Var,
    table: Arc<NeighborTable>,
    infl: Arc<InfluenceTable<T>>,
}

impl<T: Real> Backward<T> for FullSumBack<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let fd = values[self.x.index()].data();
        let wd = values[self.w.index()].data();
        let c = values[self.x.index()].row_len();
        let (kk, hw) = (self.infl.num_kernels, self.table.width);
        let want_x = sink.wants(self.x);
        let want_w = sink.wants(self.w);
        let mut gx = vec![T::zero(); if want_x { fd.len() } else { 0 }];
        let mut gw = vec![T::zero(); if want_w { wd.len() } else { 0 }];
        for i in 0..self.table.n_queries {
            let grow = &grad[i * c..(i + 1) * c];
            for s in 0..hw {
                let j = self.table.indices[i * hw + s];
                if j == self.table.shadow {
                    continue;
                }
                let frow = &fd[j * c..(j + 1) * c];
                let hrow = &self.infl.h[(i * hw + s) * kk..(i * hw + s + 1) * kk];
                for (k, &h) in hrow.iter().enumerate() {
                    let wrow = &wd[k * c..(k + 1) * c];
                    if want_x {
                        for ((o, &wv), &gv) in gx[j * c..(j + 1) * c].iter_mut().zip(wrow).zip(grow) {
                            *o += h * wv * gv;
                        }
                    }
                    if want_w {
                        for ((o, &fv), &gv) in gw[k * c..(k + 1) * c].iter_mut().zip(frow).zip(grow) {
                            *o += h * fv * gv;
                        }
                    }
                }
            }
        }
        if want_x {
            sink.add(self.x, &gx);
        }
        if want_w {
            sink.add(self.w, &gw);
        }
    }
}

/// Depthwise kernel point convolution where every neighbor only meets its
/// nearest kernel point. `w` is `[K × C]`.
pub fn kpconvd<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    table: &Arc<NeighborTable>,
    infl: &Arc<InfluenceTable<T>>,
    w: Var,
) -> Result<Var> {
    let f = g.value(x);
    check_inputs("kpconvd", f, table, infl, InfluenceMode::Nearest)?;
    let c = f.row_len();
    check_param("kpconvd", g.value(w), &[infl.num_kernels, c])?;
    let (fd, wd) = (f.data(), g.value(w).data());
    let hw = table.width;
    let mut out = vec![T::zero(); table.n_queries * c];
    let count = for_rows(&mut out, c, |i, orow| {
        let mut ops = 0;
        for s in i * hw..(i + 1) * hw {
            let j = table.indices[s];
            if j == table.shadow {
                continue;
            }
            let (h, k) = (infl.h[s], infl.k_star[s]);
            let frow = &fd[j * c..(j + 1) * c];
            let wrow = &wd[k * c..(k + 1) * c];
            for ((o, &wv), &fv) in orow.iter_mut().zip(wrow).zip(frow) {
                *o += (h * wv) * fv;
            }
            ops += 2 * c as u64;
        }
        ops
    });
    record(OpKind::Kpconvd, count);
    let value = Tensor::new([table.n_queries, c], out)?;
    Ok(g.record(
        value,
        Box::new(NearestBack {
            x,
            w,
            table: table.clone(),
            infl: infl.clone(),
        }),
    ))
}

struct NearestBack<T> {
    x: Var,
    w: Var,
    table: Arc<NeighborTable>,
    infl: Arc<InfluenceTable<T>>,
}

impl<T: Real> Backward<T> for NearestBack<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let fd = values[self.x.index()].data();
        let wd = values[self.w.index()].data();
        let c = values[self.x.index()].row_len();
        let hw = self.table.width;
        let want_x = sink.wants(self.x);
        let want_w = sink.wants(self.w);
        let mut gx = vec![T::zero(); if want_x { fd.len() } else { 0 }];
        let mut gw = vec![T::zero(); if want_w { wd.len() } else { 0 }];
        for (s, &j) in self.table.indices.iter().enumerate() {
            if j == self.table.shadow {
                continue;
            }
            let i = s / hw;
            let (h, k) = (self.infl.h[s], self.infl.k_star[s]);
            let grow = &grad[i * c..(i + 1) * c];
            let frow = &fd[j * c..(j + 1) * c];
            let wrow = &wd[k * c..(k + 1) * c];
            if want_x {
                for ((o, &wv), &gv) in gx[j * c..(j + 1) * c].iter_mut().zip(wrow).zip(grow) {
                    *o += h * wv * gv;
                }
            }
            if want_w {
                for ((o, &fv), &gv) in gw[k * c..(k + 1) * c].iter_mut().zip(frow).zip(grow) {
                    *o += h * fv * gv;
                }
            }
        }
        if want_x {
            sink.add(self.x, &gx);
        }
        if want_w {
            sink.add(self.w, &gw);
        }
    }
}
