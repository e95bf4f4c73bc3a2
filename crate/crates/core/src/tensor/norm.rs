use serde::{Deserialize, Serialize};

use super::{Backward, GradSink, Graph, Real, Tensor, Var};
use crate::error::{KpxError, Result};

/// Batch-norm hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            momentum: 0.1,
            eps: 1e-6,
        }
    }
}

/// Running statistics of one batch-norm layer, borrowed from the model's
/// buffers.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

/// Normalises each column of `x: [N × C]`.
///
/// Training mode uses the batch mean and (biased) variance and moves the
/// running statistics towards the batch ones (unbiased variance) with the
/// configured momentum. Eval mode uses the running statistics.
pub fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: RunningStats<'_, T>,
    cfg: &NormConfig,
    training: bool,
) -> Result<Var> {
    let xv = g.value(x);
    let shape = xv.shape().to_vec();
    if shape.len() != 2 {
        return Err(KpxError::Shape {
            op: "batch_norm",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Err(KpxError::EmptyBatch);
    }
    if g.value(gamma).len() != c || g.value(beta).len() != c || stats.mean.len() != c {
        return Err(KpxError::Shape {
            op: "batch_norm",
            lhs: shape,
            rhs: g.value(gamma).shape().to_vec(),
        });
    }
    let eps = T::of(cfg.eps);
    let (mean, var) = if training {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv_n = T::one() / T::of(n as f64);
        mean.iter_mut().for_each(|m| *m *= inv_n);
        for row in xv.data().chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_n);
        let mom = T::of(cfg.momentum);
        let unbias = if n > 1 {
            T::of(n as f64 / (n as f64 - 1.0))
        } else {
            T::one()
        };
        for j in 0..c {
            stats.mean[j] = (T::one() - mom) * stats.mean[j] + mom * mean[j];
            stats.var[j] = (T::one() - mom) * stats.var[j] + mom * var[j] * unbias;
        }
        (mean, var)
    } else {
        (stats.mean.to_vec(), stats.var.to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gv = g.value(gamma).data();
    let bv = g.value(beta).data();
    let mut xhat = Vec::with_capacity(n * c);
    let mut out = Vec::with_capacity(n * c);
    for row in xv.data().chunks(c) {
        for j in 0..c {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            out.push(h * gv[j] + bv[j]);
        }
    }
    let value = Tensor::new([n, c], out)?;
    Ok(g.record(
        value,
        Box::new(BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            c,
            training,
        }),
    ))
}

struct BatchNorm<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    c: usize,
    training: bool,
}

impl<T: Real> Backward<T> for BatchNorm<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let c = self.c;
        let n = grad.len() / c;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (g, h) in grad.chunks(c).zip(self.xhat.chunks(c)) {
            for j in 0..c {
                sum_g[j] += g[j];
                sum_gx[j] += g[j] * h[j];
            }
        }
        sink.add(self.gamma, &sum_gx);
        sink.add(self.beta, &sum_g);
        if !sink.wants(self.x) {
            return;
        }
        let gamma = values[self.gamma.index()].data();
        let gx = sink.buf(self.x);
        let inv_n = T::one() / T::of(n as f64);
        for ((o, g), h) in gx.chunks_mut(c).zip(grad.chunks(c)).zip(self.xhat.chunks(c)) {
            for j in 0..c {
                let scale = gamma[j] * self.inv_std[j];
                o[j] += if self.training {
                    scale * (g[j] - sum_g[j] * inv_n - h[j] * sum_gx[j] * inv_n)
                } else {
                    scale * g[j]
                };
            }
        }
    }
}
