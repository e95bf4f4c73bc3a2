use std::sync::Arc;

use super::ArchitectureConfig;
use crate::error::{KpxError, Result};
use crate::kernelgeo::{KernelDisposition, Point3};
use crate::kpops::{influence, InfluenceMode, InfluenceTable};
use crate::sampling::{grid_subsample, knn_truncated, NeighborTable, PoolMap, StackedCloud};
use crate::tensor::Real;

/// Geometry of one encoder layer, computed once per forward pass and read
/// by every block of the layer.
#[derive(Clone, Debug)]
pub struct LayerContext<T> {
    pub points: Vec<Point3>,
    pub lengths: Vec<usize>,
    pub cell: f64,
    pub neighbors: Arc<NeighborTable>,
    pub influence: Arc<InfluenceTable<T>>,
    /// Full-sum influences for the stem (first layer only).
    pub dense_influence: Option<Arc<InfluenceTable<T>>>,
    /// Pooling of this layer's points into the next layer's.
    pub pool: Option<PoolMap>,
    /// Next-layer queries against this layer's supports.
    pub strided_neighbors: Option<Arc<NeighborTable>>,
    pub strided_influence: Option<Arc<InfluenceTable<T>>>,
}

fn check_lengths(lengths: &[usize], layer: usize) -> Result<()> {
    match lengths.iter().position(|&n| n == 0) {
        Some(element) => Err(KpxError::Degenerate { layer, element }),
        None => Ok(()),
    }
}

/// Builds every layer's neighbor tables, influences and pooling maps.
pub fn build_contexts<T: Real>(
    cloud: &StackedCloud,
    cfg: &ArchitectureConfig,
    kernel: &KernelDisposition,
) -> Result<Vec<LayerContext<T>>> {
    let layers = cfg.num_layers();
    let mut points = cloud.points.clone();
    let mut lengths = cloud.lengths.clone();
    if lengths.is_empty() {
        return Err(KpxError::EmptyBatch);
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        check_lengths(&lengths, l)?;
        let cell = cfg.cell(l);
        let radius = cfg.conv_radius * cell;
        let h = cfg.neighbors_per_layer[l];
        let neighbors = knn_truncated(&points, &points, &lengths, &lengths, h, radius)?;
        let infl = influence(&points, &points, &neighbors, kernel, cell, InfluenceMode::Nearest)?;
        let dense = if l == 0 {
            Some(Arc::new(influence(
                &points,
                &points,
                &neighbors,
                kernel,
                cell,
                InfluenceMode::FullSum,
            )?))
        } else {
            None
        };
        let mut ctx = LayerContext {
            points: Vec::new(),
            lengths: Vec::new(),
            cell,
            neighbors: Arc::new(neighbors),
            influence: Arc::new(infl),
            dense_influence: dense,
            pool: None,
            strided_neighbors: None,
            strided_influence: None,
        };
        let next = if l + 1 < layers {
            let geometry = StackedCloud::new(points.clone(), Vec::new(), 0, lengths.clone(), None)?;
            let (sub, pool) = grid_subsample(&geometry, cfg.cell(l + 1))?;
            let strided = knn_truncated(&sub.points, &points, &sub.lengths, &lengths, h, radius)?;
            let sinfl = influence(&sub.points, &points, &strided, kernel, cell, InfluenceMode::Nearest)?;
            ctx.pool = Some(pool);
            ctx.strided_neighbors = Some(Arc::new(strided));
            ctx.strided_influence = Some(Arc::new(sinfl));
            Some((sub.points, sub.lengths))
        } else {
            None
        };
        ctx.points = points;
        ctx.lengths = lengths;
        out.push(ctx);
        match next {
            Some((p, n)) => {
                points = p;
                lengths = n;
            }
            None => break,
        }
    }
    Ok(out)
}
