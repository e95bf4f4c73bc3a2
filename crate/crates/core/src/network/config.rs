use serde::{Deserialize, Serialize};

use crate::error::{KpxError, Result};
use crate::tensor::NormConfig;

/// Local operator used inside blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Kpconvx,
    Kpconvd,
}

/// Marker for "one group spanning all channels" (`groups = "C"`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllChannels {
    C,
}

/// Number of channels sharing one modulation value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Groups {
    Size(usize),
    All(AllChannels),
}

impl Groups {
    pub fn size_for(self, channels: usize) -> usize {
        match self {
            Groups::Size(g) => g,
            Groups::All(_) => channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Head {
    Segmentation { classes: usize },
    Classification { classes: usize },
}

impl Head {
    pub fn classes(self) -> usize {
        match self {
            Head::Segmentation { classes } | Head::Classification { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub blocks_per_layer: Vec<usize>,
    #[serde(default = "one")]
    pub decoder_blocks_per_layer: usize,
    pub channels_per_layer: Vec<usize>,
    pub neighbors_per_layer: Vec<usize>,
    /// Kernel radius in units of the layer's cell size.
    pub conv_radius: f64,
    pub grid_ratio: f64,
    /// Cell size of the first layer, in meters.
    pub first_cell: f64,
    pub shell_counts: Vec<usize>,
    pub operator: Operator,
    pub groups: Groups,
    pub droppath_rate: f64,
    #[serde(default)]
    pub double_shortcut: bool,
    pub head: Head,
    pub in_channels: usize,
    #[serde(default = "expansion")]
    pub expansion: usize,
    #[serde(default = "seg_hidden")]
    pub seg_hidden: usize,
    #[serde(default = "cls_hidden")]
    pub cls_hidden: usize,
    #[serde(default = "slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub norm: NormConfig,
    #[serde(default = "yes")]
    pub modulation_bias: bool,
    #[serde(default)]
    pub kernel_seed: u64,
}

fn one() -> usize {
    1
}
fn expansion() -> usize {
    4
}
fn seg_hidden() -> usize {
    64
}
fn cls_hidden() -> usize {
    256
}
fn slope() -> f64 {
    0.1
}
fn yes() -> bool {
    true
}

/// Widths growing by √2 per layer, kept on multiples of 16. Each width is
/// the ideal `initial · √2^l` rounded up to a multiple of 16, bumped by 16
/// when that would not exceed the previous width.
pub fn channel_schedule(initial: usize, layers: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(layers);
    for l in 0..layers {
        let ideal = initial as f64 * std::f64::consts::SQRT_2.powi(l as i32);
        // tolerate float noise on exact multiples such as 64·√2⁴
        let mut c = ((ideal - 1e-9) / 16.0).ceil() as usize * 16;
        if let Some(&prev) = out.last() {
            if c <= prev {
                c = prev + 16;
            }
        }
        out.push(c);
    }
    out
}

pub const PRESETS: [&str; 6] = ["kpconvx-l", "kpconvx-s", "kpconvd-l", "kpconvd-s", "tiny-seg", "tiny-cls"];

impl ArchitectureConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let large = vec![3, 3, 9, 12, 3];
        let small = vec![2, 2, 2, 8, 2];
        let paper = |blocks: Vec<usize>, operator| ArchitectureConfig {
            blocks_per_layer: blocks,
            decoder_blocks_per_layer: 1,
            channels_per_layer: channel_schedule(64, 5),
            neighbors_per_layer: vec![12, 16, 20, 20, 20],
            conv_radius: 2.1,
            grid_ratio: 2.2,
            first_cell: 0.04,
            shell_counts: vec![1, 14, 28],
            operator,
            groups: Groups::Size(8),
            droppath_rate: 0.1,
            double_shortcut: false,
            head: Head::Segmentation { classes: 13 },
            in_channels: 5,
            expansion: 4,
            seg_hidden: 64,
            cls_hidden: 256,
            leaky_slope: 0.1,
            norm: NormConfig::default(),
            modulation_bias: true,
            kernel_seed: 0,
        };
        let tiny = |head| ArchitectureConfig {
            blocks_per_layer: vec![1, 1, 1, 2, 1],
            channels_per_layer: channel_schedule(16, 5),
            neighbors_per_layer: vec![8, 8, 10, 10, 10],
            shell_counts: vec![1, 6],
            in_channels: 2,
            seg_hidden: 32,
            cls_hidden: 64,
            head,
            ..paper(large.clone(), Operator::Kpconvx)
        };
        Ok(match name {
            "kpconvx-l" => paper(large, Operator::Kpconvx),
            "kpconvx-s" => paper(small, Operator::Kpconvx),
            "kpconvd-l" => paper(large, Operator::Kpconvd),
            "kpconvd-s" => paper(small, Operator::Kpconvd),
            "tiny-seg" => tiny(Head::Segmentation { classes: 4 }),
            // Classification clouds are normalized to the unit sphere.
            "tiny-cls" => ArchitectureConfig {
                first_cell: 0.1,
                ..tiny(Head::Classification { classes: 4 })
            },
            other => {
                return Err(KpxError::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| KpxError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_layers(&self) -> usize {
        self.channels_per_layer.len()
    }

    pub fn num_kernel_points(&self) -> usize {
        self.shell_counts.iter().sum()
    }

    pub fn group_size(&self, channels: usize) -> usize {
        self.groups.size_for(channels)
    }

    pub fn cell(&self, layer: usize) -> f64 {
        self.first_cell * self.grid_ratio.powi(layer as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KpxError::Config(m));
        let l = self.channels_per_layer.len();
        if l == 0 || self.blocks_per_layer.len() != l || self.neighbors_per_layer.len() != l {
            return bad(format!(
                "blocks ({}), channels ({l}) and neighbors ({}) lists must have one equal, nonzero length",
                self.blocks_per_layer.len(),
                self.neighbors_per_layer.len()
            ));
        }
        for &c in &self.channels_per_layer {
            if c == 0 || c % 16 != 0 {
                return bad(format!("layer width {c} is not a positive multiple of 16"));
            }
            let g = self.group_size(c);
            if g == 0 || c % g != 0 {
                return bad(format!("layer width {c} is not divisible by group size {g}"));
            }
        }
        if self.neighbors_per_layer.contains(&0) {
            return bad("neighbor counts must be at least 1".into());
        }
        if !(self.conv_radius > 0.0 && self.first_cell > 0.0 && self.grid_ratio > 1.0) {
            return bad("conv_radius and first_cell must be positive, grid_ratio above 1".into());
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return bad(format!("droppath_rate {} outside [0, 1)", self.droppath_rate));
        }
        if self.shell_counts.first() != Some(&1) || self.shell_counts.len() < 2 || self.shell_counts.contains(&0) {
            return bad(format!("shell counts {:?} must look like [1, N1, ...]", self.shell_counts));
        }
        if self.in_channels == 0 || self.head.classes() == 0 || self.expansion == 0 {
            return bad("in_channels, classes and expansion must be positive".into());
        }
        Ok(())
    }
}
