//! Synthetic datasets of labeled geometric primitives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::rotate_about;
use super::stream_seed;
use crate::error::{KpxError, Result};
use crate::kernelgeo::Point3;
use crate::sampling::{grid_subsample, StackedCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Classification,
}

/// Primitive shapes; the index is the class id.
pub const PRIMITIVES: [&str; 4] = ["plane", "sphere", "edge", "corner"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub classes: usize,
    /// Points drawn per cloud before grid subsampling.
    pub points_per_cloud: usize,
    pub noise: f64,
    pub seed: u64,
    pub train_clouds: usize,
    pub val_clouds: usize,
    /// Grid cell applied to every generated cloud.
    pub cell: f64,
}

impl SyntheticSpec {
    pub fn segmentation(noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            task: Task::Segmentation,
            classes: 4,
            points_per_cloud: 4000,
            noise,
            seed,
            train_clouds: 24,
            val_clouds: 8,
            cell: 0.04,
        }
    }

    pub fn classification(noise: f64, seed: u64) -> Self {
        SyntheticSpec {
            task: Task::Classification,
            classes: 4,
            points_per_cloud: 2000,
            noise,
            seed,
            train_clouds: 48,
            val_clouds: 16,
            cell: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=PRIMITIVES.len()).contains(&self.classes) {
            return Err(KpxError::Config(format!("synthetic data supports 1 to 4 classes, got {}", self.classes)));
        }
        if self.points_per_cloud < self.classes || !(self.cell > 0.0) || self.noise < 0.0 {
            return Err(KpxError::Config("invalid synthetic point count, cell or noise".into()));
        }
        Ok(())
    }
}

/// One cloud. Segmentation samples carry one label per point,
/// classification samples a single label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub points: Vec<Point3>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Label histogram over the training split (points for segmentation,
    /// clouds for classification).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for s in &self.train {
            for &l in &s.labels {
                h[l] += 1;
            }
        }
        h
    }
}

/// Points sampled uniformly on a primitive of area ≈ 0.25, centered near
/// the origin.
fn primitive(kind: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let mut u = || rng.random::<f64>();
    (0..n)
        .map(|_| match kind {
            0 => [u() * 0.5 - 0.25, u() * 0.5 - 0.25, 0.0],
            1 => {
                let r = 0.2;
                let z = r * u();
                let phi = std::f64::consts::TAU * u();
                let s = (r * r - z * z).sqrt();
                [s * phi.cos(), s * phi.sin(), z - r / 2.0]
            }
            2 => {
                let x = u() * 0.5 - 0.25;
                let t = u() * 0.25;
                if u() < 0.5 {
                    [x, t - 0.1, -0.1]
                } else {
                    [x, -0.1, t - 0.1]
                }
            }
            _ => {
                let a = 0.289;
                let (s, t) = (u() * a, u() * a);
                let c = -a / 3.0;
                match (u() * 3.0) as usize {
                    0 => [s + c, t + c, c],
                    1 => [c, s + c, t + c],
                    _ => [s + c, c, t + c],
                }
            }
        })
        .collect()
}

fn place(points: &mut [Point3], rng: &mut ChaCha8Rng, tilt: f64, offset: Point3) {
    let tx = rng.random_range(-tilt..=tilt);
    let ty = rng.random_range(-tilt..=tilt);
    let tz = rng.random_range(0.0..std::f64::consts::TAU);
    rotate_about(points, 0, tx);
    rotate_about(points, 1, ty);
    rotate_about(points, 2, tz);
    for p in points {
        for k in 0..3 {
            p[k] += offset[k];
        }
    }
}

fn finish(mut points: Vec<Point3>, labels: Option<Vec<usize>>, noise: f64, cell: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if noise > 0.0 {
        let d = Normal::new(0.0, noise).expect("finite noise");
        for p in &mut points {
            for v in p.iter_mut() {
                *v += d.sample(rng);
            }
        }
    }
    let cloud = StackedCloud::single(points, Vec::new(), 0, labels)?;
    let (sub, _) = grid_subsample(&cloud, cell)?;
    Ok(Sample {
        points: sub.points,
        labels: sub.labels.unwrap_or_default(),
    })
}

fn segmentation_cloud(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut slots = [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]];
    slots.shuffle(rng);
    let per = spec.points_per_cloud / spec.classes;
    let mut points = Vec::with_capacity(per * spec.classes);
    let mut labels = Vec::with_capacity(per * spec.classes);
    for (class, slot) in slots.iter().take(spec.classes).enumerate() {
        let mut p = primitive(class, per, rng);
        let offset = [
            slot[0] + rng.random_range(-0.05..=0.05),
            slot[1] + rng.random_range(-0.05..=0.05),
            rng.random_range(-0.05..=0.05),
        ];
        place(&mut p, rng, 0.2, offset);
        points.extend(p);
        labels.extend(std::iter::repeat_n(class, per));
    }
    finish(points, Some(labels), spec.noise, spec.cell, rng)
}

fn classification_cloud(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut p = primitive(class, spec.points_per_cloud, rng);
    let r = p.iter().map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()).fold(1e-12, f64::max);
    for q in &mut p {
        *q = q.map(|v| v / r);
    }
    place(&mut p, rng, 0.2, [0.0; 3]);
    let s = finish(p, None, spec.noise, spec.cell, rng)?;
    Ok(Sample {
        points: s.points,
        labels: vec![class],
    })
}

/// Generates train and validation splits. Every cloud has its own RNG
/// stream keyed by the seed, the split and the cloud index.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |split: u64, count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[spec.seed, split, i as u64]));
                match spec.task {
                    Task::Segmentation => segmentation_cloud(spec, &mut rng),
                    Task::Classification => classification_cloud(spec, i % spec.classes, &mut rng),
                }
            })
            .collect()
    };
    Ok(Dataset {
        task: spec.task,
        classes: spec.classes,
        train: make(0, spec.train_clouds)?,
        val: make(1, spec.val_clouds)?,
    })
}

/// Input features per point: `[1]`, `[1, z]`, or for five channels
/// `[1, r, g, b, z]` with zero colors.
pub fn input_features(points: &[Point3], channels: usize) -> Result<Vec<f64>> {
    let mut f = Vec::with_capacity(points.len() * channels);
    for p in points {
        match channels {
            1 => f.push(1.0),
            2 => f.extend([1.0, p[2]]),
            5 => f.extend([1.0, 0.0, 0.0, 0.0, p[2]]),
            c => return Err(KpxError::Config(format!("no synthetic feature layout with {c} channels"))),
        }
    }
    Ok(f)
}
