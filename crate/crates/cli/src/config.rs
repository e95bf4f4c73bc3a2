//! Run files: a base preset, architecture overrides, training settings and
//! data settings in one TOML document.
//!
//! ```toml
//! preset = "tiny-seg"
//!
//! [architecture]
//! droppath_rate = 0.05
//!
//! [train]
//! batch_clouds = 2
//!
//! [train.optimizer]
//! epochs = 10
//!
//! [data]
//! noise = 0.005
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpx::network::ArchitectureConfig;
use kpx::train::TrainConfig;
use serde::Deserialize;

pub const DEFAULT_PRESET: &str = "tiny-seg";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub preset: Option<String>,
    pub architecture: Option<toml::Table>,
    pub train: TrainConfig,
    pub data: DataSection,
}

/// Where training and validation clouds come from. Without `dir` the
/// synthetic generator is used, with its task-specific defaults for any
/// field left out.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub noise: Option<f64>,
    pub points_per_cloud: Option<usize>,
    pub train_clouds: Option<usize>,
    pub val_clouds: Option<usize>,
    pub votes: Option<usize>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut run: RunFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(dir) = &run.data.dir {
            if dir.is_relative() {
                run.data.dir = Some(path.parent().unwrap_or(Path::new(".")).join(dir));
            }
        }
        Ok(run)
    }

    /// The architecture: `preset` (or the default preset when neither a
    /// preset nor a full architecture is given) with the `[architecture]`
    /// table merged over it. `preset_flag` replaces the file's preset.
    pub fn architecture(&self, preset_flag: Option<&str>) -> Result<ArchitectureConfig> {
        let preset = preset_flag.or(self.preset.as_deref());
        let mut base = match (preset, &self.architecture) {
            (Some(name), _) => preset_table(name)?,
            (None, Some(_)) => toml::Table::new(),
            (None, None) => preset_table(DEFAULT_PRESET)?,
        };
        if let Some(over) = &self.architecture {
            merge(&mut base, over);
        }
        let cfg: ArchitectureConfig =
            toml::Value::Table(base).try_into().context("invalid [architecture] section")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn preset_table(name: &str) -> Result<toml::Table> {
    let cfg = ArchitectureConfig::preset(name)?;
    Ok(toml::Table::try_from(&cfg)?)
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Resolves `--arch`: a preset name, a run file, or a bare architecture
/// file as written by `ArchitectureConfig::to_toml`.
pub fn resolve_arch(arch: &str) -> Result<ArchitectureConfig> {
    let path = Path::new(arch);
    if !path.exists() {
        if arch.ends_with(".toml") {
            bail!("architecture file {arch} does not exist");
        }
        return Ok(ArchitectureConfig::preset(arch)?);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {arch}"))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {arch}"))?;
    let is_run_file = ["preset", "architecture", "train", "data"]
        .iter()
        .any(|k| table.contains_key(*k));
    if is_run_file {
        RunFile::load(path)?.architecture(None)
    } else {
        Ok(ArchitectureConfig::from_toml(&text)?)
    }
}
