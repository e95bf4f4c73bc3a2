//! Datasets on disk: `DIR/train/*.ply` and `DIR/val/*.ply`, one cloud per
//! file, labels stored per point.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpx::io::{read_ply, write_ply};
use kpx::sampling::StackedCloud;
use kpx::train::{Dataset, Sample, Task};

pub fn ply_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_split(dir: &Path, task: Task) -> Result<Vec<Sample>> {
    let files = ply_files(dir)?;
    if files.is_empty() {
        bail!("no .ply files in {}", dir.display());
    }
    files.iter().map(|f| read_sample(f, task)).collect()
}

fn read_sample(path: &Path, task: Task) -> Result<Sample> {
    let cloud = read_ply(path)?;
    let Some(labels) = cloud.labels else {
        bail!("{}: no `label` vertex property", path.display());
    };
    let labels = match task {
        Task::Segmentation => labels,
        Task::Classification => {
            let first = *labels.first().with_context(|| format!("{}: empty cloud", path.display()))?;
            if labels.iter().any(|&l| l != first) {
                bail!("{}: classification clouds need a single label", path.display());
            }
            vec![first]
        }
    };
    Ok(Sample {
        points: cloud.points,
        labels,
    })
}

/// Reads `dir/train` and `dir/val`.
pub fn read_dataset(dir: &Path, task: Task, classes: usize) -> Result<Dataset> {
    Ok(Dataset {
        task,
        classes,
        train: read_split(&dir.join("train"), task)?,
        val: read_split(&dir.join("val"), task)?,
    })
}

/// Validation clouds of `dir`: `dir/val` when present, else `dir` itself.
pub fn read_eval_split(dir: &Path, task: Task) -> Result<Vec<Sample>> {
    let val = dir.join("val");
    read_split(if val.is_dir() { &val } else { dir }, task)
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        for (i, s) in split.iter().enumerate() {
            let labels = match data.task {
                Task::Segmentation => s.labels.clone(),
                Task::Classification => vec![s.labels[0]; s.points.len()],
            };
            let cloud = StackedCloud::single(s.points.clone(), Vec::new(), 0, Some(labels))?;
            write_ply(&cloud, &sub.join(format!("{i:04}.ply")))?;
        }
    }
    Ok(())
}
