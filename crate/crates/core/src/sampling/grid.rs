use std::collections::HashMap;
use std::sync::Arc;

use super::StackedCloud;
use crate::error::{KpxError, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Assignment of fine points to the coarse points of a grid subsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMap {
    /// Output row of every input point.
    pub assign: Arc<Vec<usize>>,
    /// Hashed cell id of every input point (salted by batch element).
    pub cell_ids: Vec<u64>,
    pub n_out: usize,
}

impl PoolMap {
    /// Number of input points merged into each output point.
    pub fn populations(&self) -> Vec<usize> {
        let mut p = vec![0; self.n_out];
        for &o in self.assign.iter() {
            p[o] += 1;
        }
        p
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn cell_hash(key: (i64, i64, i64), salt: u64) -> u64 {
    let mut h = mix64(salt.wrapping_add(0x9e37_79b9_7f4a_7c15));
    for c in [key.0, key.1, key.2] {
        h = mix64(h ^ (c as u64));
    }
    h
}

pub(crate) fn cell_key(p: [f64; 3], cell: f64) -> (i64, i64, i64) {
    (
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    )
}

/// Merges the points of every occupied cubic cell (per batch element) into
/// one point at their centroid. Features are max-pooled per channel, labels
/// take the majority vote (ties to the smaller label). Output points appear
/// in order of first occurrence of their cell.
pub fn grid_subsample(cloud: &StackedCloud, cell: f64) -> Result<(StackedCloud, PoolMap)> {
    if !(cell > 0.0) {
        return Err(KpxError::contract(format!("cell size must be positive, got {cell}")));
    }
    cloud.validate()?;
    let c = cloud.channels;
    let mut points = Vec::new();
    let mut features = Vec::new();
    let mut lengths = Vec::with_capacity(cloud.num_elements());
    let mut labels = cloud.labels.as_ref().map(|_| Vec::new());
    let mut assign = vec![0; cloud.len()];
    let mut cell_ids = vec![0; cloud.len()];

    for b in 0..cloud.num_elements() {
        let range = cloud.range(b);
        let base = points.len();
        let mut index: HashMap<(i64, i64, i64), usize> = HashMap::new();
        let mut sums: Vec<[f64; 4]> = Vec::new();
        let mut votes: Vec<HashMap<usize, usize>> = Vec::new();
        for i in range {
            let p = cloud.points[i];
            let key = cell_key(p, cell);
            let local = *index.entry(key).or_insert_with(|| {
                sums.push([0.0; 4]);
                features.extend_from_slice(&cloud.features[i * c..(i + 1) * c]);
                votes.push(HashMap::new());
                sums.len() - 1
            });
            let s = &mut sums[local];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            s[3] += 1.0;
            let out = base + local;
            for (f, &v) in features[out * c..(out + 1) * c]
                .iter_mut()
                .zip(&cloud.features[i * c..(i + 1) * c])
            {
                if v > *f {
                    *f = v;
                }
            }
            if let Some(l) = &cloud.labels {
                *votes[local].entry(l[i]).or_insert(0) += 1;
            }
            assign[i] = out;
            cell_ids[i] = cell_hash(key, b as u64);
        }
        for s in &sums {
            points.push([s[0] / s[3], s[1] / s[3], s[2] / s[3]]);
        }
        if let Some(out) = &mut labels {
            for v in &votes {
                let best = v
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(&l, _)| l)
                    .unwrap_or(0);
                out.push(best);
            }
        }
        lengths.push(sums.len());
    }
    let n_out = points.len();
    let sub = StackedCloud::new(points, features, c, lengths, labels)?;
    Ok((
        sub,
        PoolMap {
            assign: Arc::new(assign),
            cell_ids,
            n_out,
        },
    ))
}

/// Copies each coarse row to every fine point of its cell.
pub fn grid_upsample_tensor<T: Real>(coarse: &Tensor<T>, map: &PoolMap) -> Result<Tensor<T>> {
    check_map(coarse.rows(), map)?;
    let mut g = Graph::new();
    let x = g.constant(coarse.clone());
    let y = g.gather_rows(x, map.assign.clone())?;
    Ok(g.value(y).clone())
}

/// Differentiable upsampling; backward sums the gradients of each cell.
pub fn grid_upsample<T: Real>(g: &mut Graph<T>, coarse: Var, map: &PoolMap) -> Result<Var> {
    check_map(g.value(coarse).rows(), map)?;
    g.gather_rows(coarse, map.assign.clone())
}

fn check_map(rows: usize, map: &PoolMap) -> Result<()> {
    if rows != map.n_out {
        return Err(KpxError::contract(format!(
            "pool map has {} coarse points, features have {rows} rows",
            map.n_out
        )));
    }
    Ok(())
}
