use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    augment, cross_entropy, input_features, lr_schedule, rotate_about, stream_seed, AdamW, AugmentationConfig,
    ConfusionMatrix, Dataset, Metrics, OptimizerConfig, Sample, Task,
};
use crate::error::{KpxError, Result};
use crate::network::{softmax_rows, Model, RunMode};
use crate::sampling::StackedCloud;
use crate::tensor::{Graph, Real};

const ORDER_STREAM: u64 = 0x6f72_6465_72;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub augment: AugmentationConfig,
    /// Clouds per forward pass.
    pub batch_clouds: usize,
    /// Secondary cap on points per forward pass; one cloud is always taken.
    pub point_budget: usize,
    /// Defaults to 0 for segmentation and 0.2 for classification.
    pub label_smoothing: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            augment: AugmentationConfig::default(),
            batch_clouds: 4,
            point_budget: 8192,
            label_smoothing: None,
        }
    }
}

impl TrainConfig {
    pub fn smoothing(&self, task: Task) -> f64 {
        self.label_smoothing.unwrap_or(match task {
            Task::Segmentation => 0.0,
            Task::Classification => 0.2,
        })
    }
}

/// A stacked cloud with its loss targets (per point or per element).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub cloud: StackedCloud,
    pub targets: Vec<usize>,
}

/// Stacks samples, optionally augmenting sample `i` with stream
/// `seeds[i]`, and computes input features after augmentation.
pub fn make_batch(
    samples: &[&Sample],
    task: Task,
    channels: usize,
    aug: Option<(&AugmentationConfig, &[u64])>,
) -> Result<Batch> {
    let mut clouds = Vec::with_capacity(samples.len());
    let mut targets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut c = StackedCloud::single(s.points.clone(), Vec::new(), 0, None)?;
        if let Some((cfg, seeds)) = aug {
            c = augment(&c, cfg, seeds[i]);
        }
        c.features = input_features(&c.points, channels)?;
        c.channels = channels;
        clouds.push(c);
        match task {
            Task::Segmentation => targets.extend_from_slice(&s.labels),
            Task::Classification => targets.push(s.labels[0]),
        }
    }
    Ok(Batch {
        cloud: StackedCloud::stack(&clouds)?,
        targets,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// One forward/backward pass; gradients of `scale · loss` are added to the
/// model's parameter gradients.
pub fn micro_step<T: Real>(
    model: &mut Model<T>,
    batch: &Batch,
    smoothing: f64,
    scale: f64,
    mode: &mut RunMode<'_>,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &batch.cloud, mode)?;
    let loss = cross_entropy(&mut g, logits, &batch.targets, smoothing)?;
    let value = g.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(KpxError::NonFiniteLoss {
            epoch: 0,
            step: 0,
            batch_seed: 0,
        });
    }
    let scaled = g.scale(loss, T::of(scale));
    g.backward(scaled)?;
    g.accumulate_param_grads(&mut model.store);
    let z = g.value(logits);
    let correct = batch
        .targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax(z.row(i)) == t)
        .count();
    Ok(StepStats {
        loss: value,
        correct,
        total: batch.targets.len(),
    })
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss,acc";

    pub fn csv(&self) -> String {
        format!("{},{},{:.6e},{:.6},{:.6}", self.epoch, self.step, self.lr, self.loss, self.acc)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

/// Trains on `data.train`. Sample order, augmentations and DropPath draw
/// from streams keyed by `seed`, the epoch and the position in the epoch,
/// so a run is fully determined by its inputs.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let oc = &cfg.optimizer;
    oc.validate()?;
    cfg.augment.validate()?;
    if data.train.is_empty() || cfg.batch_clouds == 0 {
        return Err(KpxError::EmptyBatch);
    }
    let smoothing = cfg.smoothing(data.task);
    let channels = model.config.in_channels;
    let mut opt = AdamW::new(&model.store, oc.clone());
    let mut report = TrainReport::default();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", EpochLog::CSV_HEADER)?;
    }
    let n = data.train.len();
    let mut global_step = 0;
    for epoch in 0..oc.epochs {
        let lr = lr_schedule(epoch as f64, oc);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[seed, ORDER_STREAM, epoch as u64])));
        let mut sum = StepStats::default();
        let mut passes = 0;
        for step in 0..oc.steps_per_epoch {
            model.store.zero_grad();
            for micro in 0..oc.accumulation {
                let base = (step * oc.accumulation + micro) * cfg.batch_clouds;
                let mut picked = Vec::new();
                let mut seeds = Vec::new();
                let mut points = 0;
                for slot in base..base + cfg.batch_clouds {
                    let s = &data.train[order[slot % n]];
                    if !picked.is_empty() && points + s.points.len() > cfg.point_budget {
                        break;
                    }
                    points += s.points.len();
                    picked.push(s);
                    seeds.push(stream_seed(&[seed, epoch as u64, slot as u64]));
                }
                let batch = make_batch(&picked, data.task, channels, Some((&cfg.augment, &seeds)))?;
                let batch_seed = stream_seed(&[seed, epoch as u64, step as u64, micro as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                let stats = micro_step(
                    model,
                    &batch,
                    smoothing,
                    1.0 / oc.accumulation as f64,
                    &mut RunMode::train(&mut rng),
                )
                .map_err(|e| match e {
                    KpxError::NonFiniteLoss { .. } => {
                        log::error!("non-finite loss: epoch {epoch}, step {step}, batch seed {batch_seed}");
                        KpxError::NonFiniteLoss {
                            epoch,
                            step,
                            batch_seed,
                        }
                    }
                    other => other,
                })?;
                sum.loss += stats.loss;
                sum.correct += stats.correct;
                sum.total += stats.total;
                passes += 1;
            }
            opt.step(&mut model.store, lr)?;
            global_step += 1;
        }
        let entry = EpochLog {
            epoch,
            step: global_step,
            lr,
            loss: sum.loss / passes as f64,
            acc: sum.correct as f64 / sum.total.max(1) as f64,
        };
        log::info!("{}", entry.csv());
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", entry.csv())?;
        }
        report.epochs.push(entry);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Averages softmax outputs over `votes` rotated copies of each sample
/// (vote `v` rotates by `2πv/votes` about the vertical axis; vote 0 is the
/// unrotated input) and scores the argmax.
pub fn evaluate_voting<T: Real>(
    model: &mut Model<T>,
    samples: &[Sample],
    task: Task,
    classes: usize,
    votes: usize,
) -> Result<Evaluation> {
    if votes == 0 {
        return Err(KpxError::contract("voting needs at least one vote"));
    }
    let channels = model.config.in_channels;
    let mut confusion = ConfusionMatrix::new(classes);
    for s in samples {
        let mut acc: Vec<f64> = Vec::new();
        for v in 0..votes {
            let mut pts = s.points.clone();
            if v > 0 {
                rotate_about(&mut pts, 2, std::f64::consts::TAU * v as f64 / votes as f64);
            }
            let rotated = Sample {
                points: pts,
                labels: s.labels.clone(),
            };
            let batch = make_batch(&[&rotated], task, channels, None)?;
            let probs = softmax_rows(&model.predict(&batch.cloud)?);
            if acc.is_empty() {
                acc = vec![0.0; probs.len()];
            }
            for (a, p) in acc.iter_mut().zip(probs.data()) {
                *a += p.f64();
            }
        }
        let truth: &[usize] = &s.labels;
        for (t, row) in truth.iter().zip(acc.chunks(classes)) {
            confusion.add(*t, argmax(row));
        }
    }
    let metrics = confusion.metrics();
    Ok(Evaluation { confusion, metrics })
}
