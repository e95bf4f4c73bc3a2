use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KpxError, Result};
use crate::kernelgeo::Point3;
use crate::sampling::StackedCloud;

/// Geometric augmentations, applied in field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Center each element and scale it into the unit sphere first.
    pub unit_sphere: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_axis: usize,
    pub flip_p: f64,
    pub jitter_sigma: f64,
    pub rotate: bool,
    pub rotate_axis: usize,
    /// Color augmentations; accepted for compatibility, no effect on
    /// colorless data.
    pub color: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            unit_sphere: false,
            scale_min: 0.9,
            scale_max: 1.1,
            flip_axis: 0,
            flip_p: 0.5,
            jitter_sigma: 0.005,
            rotate: true,
            rotate_axis: 2,
            color: false,
        }
    }
}

impl AugmentationConfig {
    /// Settings under which [`augment`] returns its input unchanged.
    pub fn identity() -> Self {
        AugmentationConfig {
            unit_sphere: false,
            scale_min: 1.0,
            scale_max: 1.0,
            flip_p: 0.0,
            jitter_sigma: 0.0,
            rotate: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= 1.0 && self.scale_max >= 1.0) {
            return Err(KpxError::Config("scale range must straddle 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_p) || self.jitter_sigma < 0.0 {
            return Err(KpxError::Config("flip probability or jitter out of range".into()));
        }
        if self.flip_axis > 2 || self.rotate_axis > 2 {
            return Err(KpxError::Config("augmentation axes must be 0, 1 or 2".into()));
        }
        Ok(())
    }
}

/// Rotates points by `angle` radians about coordinate axis `axis`.
pub fn rotate_about(points: &mut [Point3], axis: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    for p in points {
        let (u, v) = (p[a], p[b]);
        p[a] = c * u - s * v;
        p[b] = s * u + c * v;
    }
}

/// Applies the configured augmentations to every element with draws from
/// a stream seeded by `seed`. Features and labels are carried unchanged.
pub fn augment(cloud: &StackedCloud, cfg: &AugmentationConfig, seed: u64) -> StackedCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).expect("finite sigma");
    for b in 0..cloud.num_elements() {
        let pts = &mut out.points[cloud.range(b)];
        if cfg.unit_sphere && !pts.is_empty() {
            let n = pts.len() as f64;
            let mut c = [0.0; 3];
            for p in pts.iter() {
                for k in 0..3 {
                    c[k] += p[k] / n;
                }
            }
            let r = pts
                .iter()
                .map(|p| crate::kernelgeo::dist2(*p, c).sqrt())
                .fold(0.0, f64::max)
                .max(1e-12);
            for p in pts.iter_mut() {
                for k in 0..3 {
                    p[k] = (p[k] - c[k]) / r;
                }
            }
        }
        if cfg.scale_max > cfg.scale_min {
            let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
            for p in pts.iter_mut() {
                *p = p.map(|v| v * s);
            }
        } else if cfg.scale_min != 1.0 {
            for p in pts.iter_mut() {
                *p = p.map(|v| v * cfg.scale_min);
            }
        }
        if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p) {
            for p in pts.iter_mut() {
                p[cfg.flip_axis] = -p[cfg.flip_axis];
            }
        }
        if cfg.jitter_sigma > 0.0 {
            for p in pts.iter_mut() {
                for v in p.iter_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
        }
        if cfg.rotate {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            rotate_about(pts, cfg.rotate_axis, angle);
        }
    }
    out
}
