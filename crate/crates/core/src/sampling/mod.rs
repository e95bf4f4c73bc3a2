//! Stacked batches, grid pooling and fixed-width radius neighborhoods.

mod gather;
mod grid;
mod neighbors;

use std::ops::Range;

pub use gather::{shadow_gather, shadow_gather_tensor};
pub use grid::{grid_subsample, grid_upsample, grid_upsample_tensor, PoolMap};
pub use neighbors::{knn_truncated, NeighborTable};

use crate::error::{KpxError, Result};
use crate::kernelgeo::Point3;

/// Variable-length point clouds concatenated along the point axis.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedCloud {
    pub points: Vec<Point3>,
    /// Row-major `[N × channels]`.
    pub features: Vec<f64>,
    pub channels: usize,
    pub lengths: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl StackedCloud {
    pub fn new(
        points: Vec<Point3>,
        features: Vec<f64>,
        channels: usize,
        lengths: Vec<usize>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let cloud = StackedCloud {
            points,
            features,
            channels,
            lengths,
            labels,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// One-element batch.
    pub fn single(points: Vec<Point3>, features: Vec<f64>, channels: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, features, channels, vec![n], labels)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.lengths.iter().sum::<usize>() != n {
            return Err(KpxError::contract(format!(
                "lengths {:?} do not sum to {n} points",
                self.lengths
            )));
        }
        if self.features.len() != n * self.channels {
            return Err(KpxError::contract(format!(
                "{} feature values for {n} points × {} channels",
                self.features.len(),
                self.channels
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(KpxError::contract(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.lengths.len()
    }

    /// Row range of element `b`.
    pub fn range(&self, b: usize) -> Range<usize> {
        let start: usize = self.lengths[..b].iter().sum();
        start..start + self.lengths[b]
    }

    pub fn element(&self, b: usize) -> StackedCloud {
        let r = self.range(b);
        let c = self.channels;
        StackedCloud {
            points: self.points[r.clone()].to_vec(),
            features: self.features[r.start * c..r.end * c].to_vec(),
            channels: c,
            lengths: vec![r.len()],
            labels: self.labels.as_ref().map(|l| l[r].to_vec()),
        }
    }

    /// Concatenates clouds (each possibly multi-element) into one batch.
    pub fn stack(clouds: &[StackedCloud]) -> Result<StackedCloud> {
        let channels = clouds.first().map_or(0, |c| c.channels);
        if clouds.iter().any(|c| c.channels != channels) {
            return Err(KpxError::contract("stacked clouds disagree on channel count"));
        }
        let with_labels = clouds.iter().all(|c| c.labels.is_some());
        let mut out = StackedCloud {
            points: Vec::new(),
            features: Vec::new(),
            channels,
            lengths: Vec::new(),
            labels: with_labels.then(Vec::new),
        };
        for c in clouds {
            out.points.extend_from_slice(&c.points);
            out.features.extend_from_slice(&c.features);
            out.lengths.extend_from_slice(&c.lengths);
            if let (Some(dst), Some(src)) = (&mut out.labels, &c.labels) {
                dst.extend_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Element index of every point.
    pub fn batch_index(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(b, &n)| std::iter::repeat_n(b, n))
            .collect()
    }
}
