use std::sync::Arc;

use super::NeighborTable;
use crate::error::{KpxError, Result};
use crate::tensor::{Backward, GradSink, Graph, Real, Tensor, Var};

/// Gathers neighbor feature rows into `[N_query × H × C]`; shadow slots
/// read as zero vectors.
pub fn shadow_gather<T: Real>(g: &mut Graph<T>, features: Var, table: &Arc<NeighborTable>) -> Result<Var> {
    let value = shadow_gather_tensor(g.value(features), table)?;
    Ok(g.record(
        value,
        Box::new(ShadowGather {
            x: features,
            table: table.clone(),
        }),
    ))
}

pub fn shadow_gather_tensor<T: Real>(features: &Tensor<T>, table: &NeighborTable) -> Result<Tensor<T>> {
    if features.shape().len() != 2 {
        return Err(KpxError::Shape {
            op: "shadow_gather",
            lhs: features.shape().to_vec(),
            rhs: vec![table.shadow],
        });
    }
    table.validate(features.rows())?;
    let c = features.row_len();
    let mut out = vec![T::zero(); table.indices.len() * c];
    for (slot, &j) in table.indices.iter().enumerate() {
        if j != table.shadow {
            out[slot * c..(slot + 1) * c].copy_from_slice(features.row(j));
        }
    }
    Tensor::new([table.n_queries, table.width, c], out)
}

struct ShadowGather {
    x: Var,
    table: Arc<NeighborTable>,
}

impl<T: Real> Backward<T> for ShadowGather {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, grad: &[T], values: &[Tensor<T>], sink: &mut GradSink<'_, T>) {
        if !sink.wants(self.x) {
            return;
        }
        let c = values[self.x.index()].row_len();
        let gx = sink.buf(self.x);
        for (slot, &j) in self.table.indices.iter().enumerate() {
            if j == self.table.shadow {
                continue;
            }
            for (o, &v) in gx[j * c..(j + 1) * c].iter_mut().zip(&grad[slot * c..(slot + 1) * c]) {
                *o += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shadows_read_zero_and_identity_copies() {
        let f = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = NeighborTable {
            indices: vec![0, 2, 2, 1, 2, 2, 2, 2, 2],
            width: 3,
            n_queries: 3,
            shadow: 2,
        };
        let out = shadow_gather_tensor(&f, &t).unwrap();
        assert_eq!(out.shape(), &[3, 3, 2]);
        assert_eq!(&out.data()[..2], &[1.0, 2.0]);
        assert_eq!(&out.data()[6..8], &[3.0, 4.0]);
        assert!(out.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let f = Tensor::<f64>::zeros([2, 1]);
        let t = NeighborTable {
            indices: vec![3],
            width: 1,
            n_queries: 1,
            shadow: 2,
        };
        assert!(shadow_gather_tensor(&f, &t).is_err());
    }

    #[test]
    fn backward_skips_shadows() {
        let t = Arc::new(NeighborTable {
            indices: vec![0, 0, 2, 1],
            width: 2,
            n_queries: 2,
            shadow: 2,
        });
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([2, 3]), true);
        let y = shadow_gather(&mut g, x, &t).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
    }
}
