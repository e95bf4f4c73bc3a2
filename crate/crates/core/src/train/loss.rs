use crate::error::{KpxError, Result};
use crate::tensor::{Backward, GradSink, Graph, Real, Tensor, Var};

/// Mean cross-entropy of `logits: [N × n]` against smoothed one-hot
/// targets `(1 − ε)·onehot + ε/n`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let z = g.value(logits);
    if z.shape().len() != 2 || z.rows() != labels.len() {
        return Err(KpxError::Shape {
            op: "cross_entropy",
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(KpxError::contract(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let n = z.row_len();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(KpxError::Label { index, label, classes: n });
    }
    if labels.is_empty() {
        return Err(KpxError::EmptyBatch);
    }
    let probs = crate::network::softmax_rows(z);
    let off = smoothing / n as f64;
    let on = 1.0 - smoothing + off;
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &z.data()[i * n..(i + 1) * n];
        let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
        for (c, v) in row.iter().enumerate() {
            let q = if c == l { on } else { off };
            if q > 0.0 {
                loss -= q * (v.f64() - lse);
            }
        }
    }
    loss /= labels.len() as f64;
    Ok(g.record(
        Tensor::scalar(T::of(loss)),
        Box::new(CrossEntropyBack {
            logits,
            probs,
            labels: labels.to_vec(),
            on: T::of(on),
            off: T::of(off),
        }),
    ))
}

struct CrossEntropyBack<T> {
    logits: Var,
    probs: Tensor<T>,
    labels: Vec<usize>,
    on: T,
    off: T,
}

impl<T: Real> Backward<T> for CrossEntropyBack<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, grad: &[T], _values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.logits) {
            return;
        }
        let n = self.probs.row_len();
        let scale = grad[0] / T::of(self.labels.len() as f64);
        let gz = sink.buf(self.logits);
        for (i, &l) in self.labels.iter().enumerate() {
            for c in 0..n {
                let q = if c == l { self.on } else { self.off };
                gz[i * n + c] += scale * (self.probs.data()[i * n + c] - q);
            }
        }
    }
}
