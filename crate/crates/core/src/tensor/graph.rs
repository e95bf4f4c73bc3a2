use std::collections::HashMap;
use std::sync::Arc;

use super::{gemm_nn, gemm_nt, gemm_tn, matmul_dims, ParamId, ParamStore, Real, Tensor};
use crate::error::{KpxError, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of a recorded operation.
///
/// `grad` is the gradient flowing into the operation's output; the
/// implementation adds its contributions for each input through `sink`.
pub trait Backward<T: Real> {
    fn inputs(&self) -> Vec<Var>;
    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>);
}

/// Write access to input gradients during backward.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
    lens: &'a [usize],
}

impl<T: Real> GradSink<'_, T> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient accumulator of `v`, zero-initialised on first use.
    pub fn buf(&mut self, v: Var) -> &mut [T] {
        let n = self.lens[v.0];
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        for (a, &b) in self.buf(v).iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Define-by-run operation record. Nodes are appended in execution order,
/// so the node list is already topologically sorted; backward walks it in
/// reverse.
pub struct Graph<T: Real> {
    values: Vec<Tensor<T>>,
    lens: Vec<usize>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Option<Box<dyn Backward<T>>>>,
    params: Vec<(Var, ParamId)>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            lens: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of scalars held by all recorded values.
    pub fn stored_scalars(&self) -> usize {
        self.lens.iter().sum()
    }

    fn push_node(&mut self, value: Tensor<T>, requires: bool, op: Option<Box<dyn Backward<T>>>) -> Var {
        self.lens.push(value.len());
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, false, None)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, None)
    }

    /// Leaf holding a snapshot of a stored parameter. Repeated requests for
    /// the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = store.get(id);
        let value = Tensor::new(p.shape.clone(), p.value.clone()).expect("parameter shape");
        let v = self.push_node(value, p.trainable, None);
        self.params.push((v, id));
        self.param_nodes.insert(id, v);
        v
    }

    /// Appends the output of a custom operation.
    pub fn record(&mut self, value: Tensor<T>, op: Box<dyn Backward<T>>) -> Var {
        let requires = op.inputs().iter().any(|v| self.requires[v.0]);
        if requires {
            self.push_node(value, true, Some(op))
        } else {
            self.push_node(value, false, None)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value (zeros if never reached).
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.values[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Leaf gradients accumulate across calls; intermediate ones are reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(KpxError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        for i in 0..self.grads.len() {
            if self.ops[i].is_some() {
                self.grads[i] = None;
            }
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        let seed = self.grads[loss.0].get_or_insert_with(|| vec![T::zero()]);
        seed[0] += T::one();
        for i in (0..=loss.0).rev() {
            let Some(op) = self.ops[i].as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut self.grads,
                requires: &self.requires,
                lens: &self.lens,
            };
            op.backward(&grad, &self.values, &mut sink);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    /// Adds the gradients of parameter leaves into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for &(v, id) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                for (a, &b) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.record(value, Box::new(MatMul { a, b, m, k, n })))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = broadcast_len("add", self.value(a).shape(), self.value(b).shape())?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o += y;
            }
        }
        Ok(self.record(out, Box::new(Add { a, b, inner })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = broadcast_len("mul", self.value(a).shape(), self.value(b).shape())?;
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &y) in chunk.iter_mut().zip(bd) {
                *o *= y;
            }
        }
        Ok(self.record(out, Box::new(Mul { a, b, inner })))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.record(out, Box::new(Scale { x, s }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        self.record(out, Box::new(LeakyRelu { x, slope }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.record(out, Box::new(Sigmoid { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.record(Tensor::scalar(s), Box::new(SumAll { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, Box::new(Reshape { x })))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(KpxError::Shape {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let value = Tensor::new([n, ca + cb], out)?;
        Ok(self.record(value, Box::new(ConcatCols { a, b, ca, cb })))
    }

    /// `out[i] = x[index[i]]` row-wise. Backward scatters additively.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(x);
        let (n, w) = (src.rows(), src.row_len());
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(KpxError::contract(format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            out.extend_from_slice(src.row(i));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = index.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Box::new(GatherRows { x, index, w })))
    }

    /// Per-channel maximum over the rows assigned to each output row.
    /// `assign[i]` is the output row of input row `i`.
    pub fn max_pool_rows(&mut self, x: Var, assign: &[usize], n_out: usize) -> Result<Var> {
        let src = self.value(x);
        let (n, w) = (src.rows(), src.row_len());
        if assign.len() != n {
            return Err(KpxError::contract(format!(
                "pool map covers {} rows, features have {n}",
                assign.len()
            )));
        }
        let mut out = vec![T::neg_infinity(); n_out * w];
        let mut arg = vec![usize::MAX; n_out * w];
        for (i, &o) in assign.iter().enumerate() {
            for c in 0..w {
                let v = src.data()[i * w + c];
                if v > out[o * w + c] || arg[o * w + c] == usize::MAX {
                    out[o * w + c] = v;
                    arg[o * w + c] = i * w + c;
                }
            }
        }
        if arg.iter().any(|&a| a == usize::MAX) && w > 0 {
            return Err(KpxError::contract("pooling produced an empty cell"));
        }
        let value = Tensor::new([n_out, w], out)?;
        Ok(self.record(value, Box::new(MaxPoolRows { x, arg })))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let src = self.value(x);
        if factors.len() != src.rows() {
            return Err(KpxError::contract(format!(
                "{} row factors for {} rows",
                factors.len(),
                src.rows()
            )));
        }
        let w = src.row_len();
        let mut out = src.clone();
        for (row, &f) in out.data_mut().chunks_mut(w.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.record(out, Box::new(ScaleRows { x, factors, w })))
    }

    /// Mean of consecutive row segments: `[Σ lengths × C] → [B × C]`.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let w = src.row_len();
        if lengths.iter().sum::<usize>() != src.rows() {
            return Err(KpxError::contract("segment lengths do not cover all rows"));
        }
        let mut out = vec![T::zero(); lengths.len() * w];
        let mut start = 0;
        for (b, &len) in lengths.iter().enumerate() {
            if len == 0 {
                return Err(KpxError::contract(format!("segment {b} is empty")));
            }
            let inv = T::one() / T::of(len as f64);
            for i in start..start + len {
                for (o, &v) in out[b * w..(b + 1) * w].iter_mut().zip(src.row(i)) {
                    *o += v * inv;
                }
            }
            start += len;
        }
        let value = Tensor::new([lengths.len(), w], out)?;
        Ok(self.record(
            value,
            Box::new(SegmentMean {
                x,
                lengths: lengths.to_vec(),
                w,
            }),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Length of the broadcast operand; `b`'s shape must equal `a`'s or be a
/// suffix of it.
fn broadcast_len(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(b.iter().product::<usize>().max(1))
    } else {
        Err(KpxError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

struct MatMul {
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Real> Backward<T> for MatMul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if sink.wants(self.a) {
            gemm_nt(m, n, k, grad, values[self.b.0].data(), sink.buf(self.a));
        }
        if sink.wants(self.b) {
            gemm_tn(m, k, n, values[self.a.0].data(), grad, sink.buf(self.b));
        }
    }
}

struct Add {
    a: Var,
    b: Var,
    inner: usize,
}

impl<T: Real> Backward<T> for Add {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        sink.add(self.a, grad);
        if sink.wants(self.b) {
            let gb = sink.buf(self.b);
            for chunk in grad.chunks(self.inner) {
                for (o, &g) in gb.iter_mut().zip(chunk) {
                    *o += g;
                }
            }
        }
    }
}

struct Mul {
    a: Var,
    b: Var,
    inner: usize,
}

impl<T: Real> Backward<T> for Mul {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let av = values[self.a.0].data();
        let bv = values[self.b.0].data();
        if sink.wants(self.a) {
            let ga = sink.buf(self.a);
            for (i, (o, &g)) in ga.iter_mut().zip(grad).enumerate() {
                *o += g * bv[i % self.inner];
            }
        }
        if sink.wants(self.b) {
            let gb = sink.buf(self.b);
            for (i, (&g, &x)) in grad.iter().zip(av).enumerate() {
                gb[i % self.inner] += g * x;
            }
        }
    }
}

struct Scale<T> {
    x: Var,
    s: T,
}

impl<T: Real> Backward<T> for Scale<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if sink.wants(self.x) {
            for (o, &g) in sink.buf(self.x).iter_mut().zip(grad) {
                *o += g * self.s;
            }
        }
    }
}

struct LeakyRelu<T> {
    x: Var,
    slope: T,
}

impl<T: Real> Backward<T> for LeakyRelu<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let xv = values[self.x.0].data();
        if sink.wants(self.x) {
            for ((o, &g), &x) in sink.buf(self.x).iter_mut().zip(grad).zip(xv) {
                *o += if x > T::zero() { g } else { g * self.slope };
            }
        }
    }
}

struct Sigmoid {
    x: Var,
}

impl<T: Real> Backward<T> for Sigmoid {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let xv = values[self.x.0].data();
        if sink.wants(self.x) {
            for ((o, &g), &x) in sink.buf(self.x).iter_mut().zip(grad).zip(xv) {
                let s = sigmoid(x);
                *o += g * s * (T::one() - s);
            }
        }
    }
}

struct SumAll {
    x: Var,
}

impl<T: Real> Backward<T> for SumAll {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if sink.wants(self.x) {
            sink.buf(self.x).iter_mut().for_each(|o| *o += grad[0]);
        }
    }
}

struct Reshape {
    x: Var,
}

impl<T: Real> Backward<T> for Reshape {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        sink.add(self.x, grad);
    }
}

struct ConcatCols {
    a: Var,
    b: Var,
    ca: usize,
    cb: usize,
}

impl<T: Real> Backward<T> for ConcatCols {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        let w = self.ca + self.cb;
        if sink.wants(self.a) {
            let ga = sink.buf(self.a);
            for (row, g) in ga.chunks_mut(self.ca.max(1)).zip(grad.chunks(w)) {
                for (o, &v) in row.iter_mut().zip(&g[..self.ca]) {
                    *o += v;
                }
            }
        }
        if sink.wants(self.b) {
            let gb = sink.buf(self.b);
            for (row, g) in gb.chunks_mut(self.cb.max(1)).zip(grad.chunks(w)) {
                for (o, &v) in row.iter_mut().zip(&g[self.ca..]) {
                    *o += v;
                }
            }
        }
    }
}

struct GatherRows {
    x: Var,
    index: Arc<Vec<usize>>,
    w: usize,
}

impl<T: Real> Backward<T> for GatherRows {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.x) {
            return;
        }
        let w = self.w;
        let gx = sink.buf(self.x);
        for (r, &i) in self.index.iter().enumerate() {
            for (o, &g) in gx[i * w..(i + 1) * w].iter_mut().zip(&grad[r * w..(r + 1) * w]) {
                *o += g;
            }
        }
    }
}

struct MaxPoolRows {
    x: Var,
    arg: Vec<usize>,
}

impl<T: Real> Backward<T> for MaxPoolRows {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.x) {
            return;
        }
        let gx = sink.buf(self.x);
        for (&a, &g) in self.arg.iter().zip(grad) {
            gx[a] += g;
        }
    }
}

struct ScaleRows<T> {
    x: Var,
    factors: Vec<T>,
    w: usize,
}

impl<T: Real> Backward<T> for ScaleRows<T> {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.x) || self.w == 0 {
            return;
        }
        let gx = sink.buf(self.x);
        for ((row, g), &f) in gx
            .chunks_mut(self.w)
            .zip(grad.chunks(self.w))
            .zip(&self.factors)
        {
            for (o, &v) in row.iter_mut().zip(g) {
                *o += v * f;
            }
        }
    }
}

struct SegmentMean {
    x: Var,
    lengths: Vec<usize>,
    w: usize,
}

impl<T: Real> Backward<T> for SegmentMean {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], _: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.x) {
            return;
        }
        let w = self.w;
        let gx = sink.buf(self.x);
        let mut start = 0;
        for (b, &len) in self.lengths.iter().enumerate() {
            let inv = T::one() / T::of(len as f64);
            for i in start..start + len {
                for (o, &g) in gx[i * w..(i + 1) * w].iter_mut().zip(&grad[b * w..(b + 1) * w]) {
                    *o += g * inv;
                }
            }
            start += len;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to each entry of `inputs`.
    fn numeric_grads(
        inputs: &[Tensor<f64>],
        f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> Vec<Vec<f64>> {
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = f(&mut g, &vars);
            g.value(out).data()[0]
        };
        let h = 1e-5;
        let mut all = Vec::new();
        for k in 0..inputs.len() {
            let mut gk = Vec::new();
            for i in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                gk.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            }
            all.push(gk);
        }
        all
    }

    fn check(inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        let numeric = numeric_grads(&inputs, f);
        for (v, num) in vars.iter().zip(&numeric) {
            let ana = g.grad_tensor(*v);
            for (a, n) in ana.data().iter().zip(num) {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(err < 1e-4, "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2, 3]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn leaky_relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[-0.1, 0.0, 2.0]);
        let z = g.constant(Tensor::new([2], vec![0.0, 800.0]).unwrap());
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5, 1.0]);
    }

    #[test]
    fn saturated_sigmoid_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::new([1], vec![800.0]).unwrap(), true);
        let s = g.sigmoid(z);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(z).unwrap()[0], 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2]), true);
        assert!(matches!(g.backward(x), Err(KpxError::Contract(_))));
    }

    #[test]
    fn broadcast_must_be_trailing() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros([2, 3]), true);
        let b = g.leaf(Tensor::zeros([2]), true);
        assert!(g.add(a, b).is_err());
        let c = g.leaf(Tensor::zeros([3]), true);
        assert!(g.add(a, c).is_ok());
    }

    #[test]
    fn leaf_gradients_accumulate_across_backward_calls() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([2], vec![1.0, 3.0]).unwrap(), true);
        let y = g.scale(x, 2.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random(&mut rng, &[4, 3]);
            let b = random(&mut rng, &[3, 5]);
            let bias = random(&mut rng, &[5]);
            let w = random(&mut rng, &[4, 5]);
            check(vec![a, b, bias, w], &|g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                let m = g.add(m, v[2]).unwrap();
                let m = g.leaky_relu(m, 0.1);
                let s = g.sigmoid(m);
                let p = g.mul(s, v[3]).unwrap();
                let p = g.mul(p, v[2]).unwrap();
                g.sum(p)
            });
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let index = Arc::new(vec![2, 0, 2, 1, 3]);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[5, 2]);
        let w = random(&mut rng, &[5, 5]);
        check(vec![a, b, w], &move |g, v| {
            let up = g.gather_rows(v[0], index.clone()).unwrap();
            let cat = g.concat_cols(up, v[1]).unwrap();
            let cat = g.scale_rows(cat, vec![1.0, 0.0, 2.0, 1.0, 0.5]).unwrap();
            let p = g.mul(cat, v[2]).unwrap();
            let pooled = g.max_pool_rows(p, &[0, 1, 0, 1, 1], 2).unwrap();
            let m = g.segment_mean(p, &[2, 3]).unwrap();
            let r = g.reshape(m, [10]).unwrap();
            let s1 = g.sum(r);
            let s2 = g.sum(pooled);
            let t = g.add(s1, s2).unwrap();
            g.mul(t, t).unwrap()
        });
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, &[3, 3]);
        let run = |scale: f64| {
            let mut g = Graph::new();
            let x = g.leaf(a.clone(), true);
            let y = g.mul(x, x).unwrap();
            let y = g.sigmoid(y);
            let s = g.sum(y);
            let s = g.scale(s, scale);
            g.backward(s).unwrap();
            g.grad_tensor(x)
        };
        let g1 = run(1.0);
        let g3 = run(3.0);
        for (x, y) in g1.data().iter().zip(g3.data()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }
}
