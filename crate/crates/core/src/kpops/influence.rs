use crate::error::{KpxError, Result};
use crate::kernelgeo::{KernelDisposition, Point3};
use crate::sampling::NeighborTable;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfluenceMode {
    /// One influence per neighbor, toward its nearest kernel point.
    Nearest,
    /// Influence of every kernel point on every neighbor.
    FullSum,
}

/// Linear influences `max(0, 1 − d/σ)` for one layer's neighbor table.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceTable<T> {
    pub mode: InfluenceMode,
    pub n_queries: usize,
    pub width: usize,
    pub num_kernels: usize,
    /// `[N × H]` in nearest mode, `[N × H × K]` in full-sum mode.
    pub h: Vec<T>,
    /// `[N × H]` nearest kernel index (`num_kernels` on shadow slots);
    /// empty in full-sum mode.
    pub k_star: Vec<usize>,
}

impl<T: Real> InfluenceTable<T> {
    pub fn sentinel(&self) -> usize {
        self.num_kernels
    }
}

/// Computes influences of `disp` on every neighbor offset. Offsets are
/// divided by `cell` so that the disposition is expressed in cell units.
pub fn influence<T: Real>(
    queries: &[Point3],
    supports: &[Point3],
    table: &NeighborTable,
    disp: &KernelDisposition,
    cell: f64,
    mode: InfluenceMode,
) -> Result<InfluenceTable<T>> {
    if !(disp.sigma > 0.0) || !(cell > 0.0) {
        return Err(KpxError::contract("influence needs σ > 0 and a positive cell size"));
    }
    table.validate(supports.len())?;
    if queries.len() != table.n_queries {
        return Err(KpxError::contract(format!(
            "{} queries for a neighbor table of {} rows",
            queries.len(),
            table.n_queries
        )));
    }
    let k = disp.num_points();
    let h_of = |d: f64| T::of((1.0 - d / disp.sigma).max(0.0));
    let mut out = InfluenceTable {
        mode,
        n_queries: table.n_queries,
        width: table.width,
        num_kernels: k,
        h: Vec::new(),
        k_star: Vec::new(),
    };
    let slots = table.indices.len();
    match mode {
        InfluenceMode::Nearest => {
            out.h.reserve(slots);
            out.k_star.reserve(slots);
        }
        InfluenceMode::FullSum => out.h.reserve(slots * k),
    }
    for (slot, &j) in table.indices.iter().enumerate() {
        let q = queries[slot / table.width];
        if j == table.shadow {
            match mode {
                InfluenceMode::Nearest => {
                    out.h.push(T::zero());
                    out.k_star.push(k);
                }
                InfluenceMode::FullSum => out.h.extend(std::iter::repeat_n(T::zero(), k)),
            }
            continue;
        }
        let s = supports[j];
        let offset = [(s[0] - q[0]) / cell, (s[1] - q[1]) / cell, (s[2] - q[2]) / cell];
        match mode {
            InfluenceMode::Nearest => {
                let (ks, d) = disp.nearest(offset);
                out.h.push(h_of(d));
                out.k_star.push(ks);
            }
            InfluenceMode::FullSum => {
                for x in &disp.positions {
                    out.h.push(h_of(crate::kernelgeo::dist2(offset, *x).sqrt()));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::knn_truncated;

    fn disp() -> KernelDisposition {
        KernelDisposition {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            shell_counts: vec![1, 2],
            shell_radii: vec![1.0],
            radius: 1.5,
            sigma: 0.8,
        }
    }

    #[test]
    fn influence_values() {
        let q = [[0.0; 3]];
        // at kernel point 1, at σ from kernel point 2, at σ/2 from the center
        let s = [[1.0, 0.0, 0.0], [-1.0, 0.8, 0.0], [0.0, 0.0, 0.4]];
        let t = knn_truncated(&q, &s, &[1], &[3], 4, 3.0).unwrap();
        let inf = influence::<f64>(&q, &s, &t, &disp(), 1.0, InfluenceMode::Nearest).unwrap();
        assert_eq!(t.row(0), &[2, 0, 1, 3]);
        assert_eq!(inf.k_star, vec![0, 1, 2, 3]);
        assert!((inf.h[0] - 0.5).abs() < 1e-12);
        assert_eq!(inf.h[1], 1.0);
        assert!(inf.h[2].abs() < 1e-12);
        assert_eq!(inf.h[3], 0.0);
    }

    #[test]
    fn offsets_are_in_cell_units() {
        let q = [[0.0; 3]];
        let s = [[0.1, 0.0, 0.0]];
        let t = knn_truncated(&q, &s, &[1], &[1], 1, 1.0).unwrap();
        let inf = influence::<f64>(&q, &s, &t, &disp(), 0.1, InfluenceMode::FullSum).unwrap();
        assert_eq!(inf.h.len(), 3);
        assert!(inf.h[0].abs() < 1e-12);
        assert_eq!(inf.h[1], 1.0);
        assert_eq!(inf.h[2], 0.0);
    }
}
