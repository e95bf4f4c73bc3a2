use std::collections::HashMap;

use super::grid::cell_key;
use crate::error::{KpxError, Result};
use crate::kernelgeo::{dist2, Point3};

/// Fixed-width neighbor lists. Slots beyond the real neighbors hold the
/// shadow index (`== number of supports`).
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub indices: Vec<usize>,
    pub width: usize,
    pub n_queries: usize,
    pub shadow: usize,
}

impl NeighborTable {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }

    pub fn real_count(&self, i: usize) -> usize {
        self.row(i).iter().take_while(|&&j| j != self.shadow).count()
    }

    /// Table with `extra` additional shadow slots per row.
    pub fn padded(&self, extra: usize) -> NeighborTable {
        let width = self.width + extra;
        let mut indices = Vec::with_capacity(self.n_queries * width);
        for i in 0..self.n_queries {
            indices.extend_from_slice(self.row(i));
            indices.extend(std::iter::repeat_n(self.shadow, extra));
        }
        NeighborTable {
            indices,
            width,
            n_queries: self.n_queries,
            shadow: self.shadow,
        }
    }

    pub fn validate(&self, n_supports: usize) -> Result<()> {
        if self.shadow != n_supports {
            return Err(KpxError::contract(format!(
                "neighbor table built for {} supports, got {n_supports}",
                self.shadow
            )));
        }
        if self.indices.len() != self.n_queries * self.width {
            return Err(KpxError::contract("neighbor table size mismatch"));
        }
        if let Some(&bad) = self.indices.iter().find(|&&j| j > self.shadow) {
            return Err(KpxError::contract(format!(
                "neighbor index {bad} beyond shadow index {}",
                self.shadow
            )));
        }
        Ok(())
    }
}

/// Up to `h` nearest supports within distance `r` of every query, sorted
/// by ascending distance (ties by smaller support index), searched only
/// inside the query's own batch element.
pub fn knn_truncated(
    queries: &[Point3],
    supports: &[Point3],
    lengths_q: &[usize],
    lengths_s: &[usize],
    h: usize,
    r: f64,
) -> Result<NeighborTable> {
    if h == 0 {
        return Err(KpxError::contract("neighbor count must be at least 1"));
    }
    if !(r > 0.0) {
        return Err(KpxError::contract(format!("search radius must be positive, got {r}")));
    }
    if lengths_q.len() != lengths_s.len() {
        return Err(KpxError::contract(format!(
            "{} query elements vs {} support elements",
            lengths_q.len(),
            lengths_s.len()
        )));
    }
    if lengths_q.iter().sum::<usize>() != queries.len() || lengths_s.iter().sum::<usize>() != supports.len() {
        return Err(KpxError::contract("element lengths do not cover the points"));
    }
    let shadow = supports.len();
    let r2 = r * r;
    let mut indices = vec![shadow; queries.len() * h];
    let (mut q0, mut s0) = (0, 0);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for (&nq, &ns) in lengths_q.iter().zip(lengths_s) {
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for j in s0..s0 + ns {
            grid.entry(cell_key(supports[j], r)).or_default().push(j);
        }
        for i in q0..q0 + nq {
            let q = queries[i];
            let (cx, cy, cz) = cell_key(q, r);
            cand.clear();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in list {
                                let d = dist2(q, supports[j]);
                                if d <= r2 {
                                    cand.push((d, j));
                                }
                            }
                        }
                    }
                }
            }
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (slot, &(_, j)) in indices[i * h..(i + 1) * h].iter_mut().zip(cand.iter()) {
                *slot = j;
            }
        }
        q0 += nq;
        s0 += ns;
    }
    Ok(NeighborTable {
        indices,
        width: h,
        n_queries: queries.len(),
        shadow,
    })
}
