use std::collections::BTreeMap;
use std::fmt;

use super::{ArchitectureConfig, Head, Operator};
use crate::tensor::{ParamKind, ParamStore, Real};

/// Trainable parameter counts split by kind and by top-level module
/// (`stem`, `enc{l}`, `dec{l}`, `head`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamAudit {
    pub kernel: usize,
    pub modulation: usize,
    pub linear: usize,
    pub norm: usize,
    pub modules: BTreeMap<String, usize>,
}

impl ParamAudit {
    pub fn total(&self) -> usize {
        self.kernel + self.modulation + self.linear + self.norm
    }

    fn add(&mut self, module: &str, kind: ParamKind, n: usize) {
        match kind {
            ParamKind::Kernel => self.kernel += n,
            ParamKind::Modulation => self.modulation += n,
            ParamKind::Linear => self.linear += n,
            ParamKind::Norm => self.norm += n,
            ParamKind::Buffer => return,
        }
        *self.modules.entry(module.to_string()).or_default() += n;
    }

    /// Counts what is actually stored.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let mut a = ParamAudit::default();
        for (_, p) in store.iter() {
            let module = p.name.split('.').next().unwrap_or("");
            a.add(module, p.kind, p.numel());
        }
        a
    }

    /// Closed-form counts derived from the configuration alone.
    pub fn analytic(cfg: &ArchitectureConfig) -> Self {
        let mut a = ParamAudit::default();
        let k = cfg.num_kernel_points();
        let ch = &cfg.channels_per_layer;
        let e = cfg.expansion;
        let lin = |a: &mut ParamAudit, m: &str, i: usize, o: usize| a.add(m, ParamKind::Linear, i * o + o);
        let norm = |a: &mut ParamAudit, m: &str, c: usize| a.add(m, ParamKind::Norm, 2 * c);
        let conv = |a: &mut ParamAudit, m: &str, c: usize| {
            a.add(m, ParamKind::Kernel, k * c);
            if cfg.operator == Operator::Kpconvx {
                let cg = c / cfg.group_size(c);
                let bias = if cfg.modulation_bias { c + k * cg } else { 0 };
                a.add(m, ParamKind::Modulation, c * c + c * k * cg + bias);
            }
        };
        let block = |a: &mut ParamAudit, m: &str, c: usize| {
            conv(a, m, c);
            norm(a, m, c);
            lin(a, m, c, e * c);
            norm(a, m, e * c);
            lin(a, m, e * c, c);
            norm(a, m, c);
        };

        a.add("stem", ParamKind::Kernel, k * cfg.in_channels * ch[0]);
        norm(&mut a, "stem", ch[0]);
        for (l, &c) in ch.iter().enumerate() {
            let m = format!("enc{l}");
            if l > 0 {
                conv(&mut a, &m, ch[l - 1]);
                norm(&mut a, &m, ch[l - 1]);
                lin(&mut a, &m, ch[l - 1], c);
                norm(&mut a, &m, c);
            }
            for _ in 0..cfg.blocks_per_layer[l] {
                block(&mut a, &m, c);
            }
        }
        let (inp, hid, classes) = match cfg.head {
            Head::Segmentation { classes } => {
                for l in 0..ch.len() - 1 {
                    let m = format!("dec{l}");
                    lin(&mut a, &m, ch[l + 1] + ch[l], ch[l]);
                    norm(&mut a, &m, ch[l]);
                    for _ in 0..cfg.decoder_blocks_per_layer {
                        block(&mut a, &m, ch[l]);
                    }
                }
                (ch[0], cfg.seg_hidden, classes)
            }
            Head::Classification { classes } => (ch[ch.len() - 1], cfg.cls_hidden, classes),
        };
        lin(&mut a, "head", inp, hid);
        norm(&mut a, "head", hid);
        lin(&mut a, "head", hid, classes);
        a
    }
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "module,parameters")?;
        for (m, n) in &self.modules {
            writeln!(f, "{m},{n}")?;
        }
        writeln!(f, "kernel,{}", self.kernel)?;
        writeln!(f, "modulation,{}", self.modulation)?;
        writeln!(f, "linear,{}", self.linear)?;
        writeln!(f, "norm,{}", self.norm)?;
        write!(f, "total,{}", self.total())
    }
}
