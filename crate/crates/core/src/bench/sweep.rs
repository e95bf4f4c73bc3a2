//! Timed parameter sweeps over the kernel point operators.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::counter::{count_ops, OpCounter, OpKind};
use crate::error::{KpxError, Result};
use crate::kernelgeo::{optimize_disposition, KernelDisposition, Point3};
use crate::kpops::{
    influence, kpconv_dense, kpconvd, kpconvd_fullsum, kpconvx, kpinv, InfluenceMode, InfluenceTable, ModulationHead,
};
use crate::parallel;
use crate::sampling::{knn_truncated, NeighborTable};
use crate::tensor::{Graph, Tensor, Var};

/// Operator under benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Kpconv,
    KpconvdFullsum,
    Kpconvd,
    Kpconvx,
    Kpinv,
}

impl BenchOp {
    pub const ALL: [BenchOp; 5] = [
        BenchOp::Kpconv,
        BenchOp::KpconvdFullsum,
        BenchOp::Kpconvd,
        BenchOp::Kpconvx,
        BenchOp::Kpinv,
    ];

    pub fn kind(self) -> OpKind {
        match self {
            BenchOp::Kpconv => OpKind::KpconvDense,
            BenchOp::KpconvdFullsum => OpKind::KpconvdFullsum,
            BenchOp::Kpconvd => OpKind::Kpconvd,
            BenchOp::Kpconvx => OpKind::Kpconvx,
            BenchOp::Kpinv => OpKind::Kpinv,
        }
    }

    fn mode(self) -> InfluenceMode {
        match self {
            BenchOp::Kpconv | BenchOp::KpconvdFullsum => InfluenceMode::FullSum,
            _ => InfluenceMode::Nearest,
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().name())
    }
}

impl FromStr for BenchOp {
    type Err = KpxError;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL
            .into_iter()
            .find(|op| op.kind().name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BenchOp::ALL.iter().map(|o| o.kind().name()).collect();
                KpxError::Config(format!("unknown operator `{s}` (known: {})", names.join(", ")))
            })
    }
}

/// Dimension varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    K,
    N,
    H,
    C,
    G,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::K => "K",
            SweepParam::N => "N",
            SweepParam::H => "H",
            SweepParam::C => "C",
            SweepParam::G => "G",
        })
    }
}

/// Parses `K=15,27,43` style sweep descriptions.
pub fn parse_sweep(text: &str) -> Result<(SweepParam, Vec<usize>)> {
    let bad = || KpxError::Config(format!("sweep must look like K=15,27,43, got `{text}`"));
    let (name, values) = text.split_once('=').ok_or_else(bad)?;
    let param = match name.trim() {
        "K" | "k" => SweepParam::K,
        "N" | "n" => SweepParam::N,
        "H" | "h" => SweepParam::H,
        "C" | "c" => SweepParam::C,
        "G" | "g" => SweepParam::G,
        _ => return Err(bad()),
    };
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() || values.contains(&0) {
        return Err(bad());
    }
    Ok((param, values))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub op: BenchOp,
    pub param: SweepParam,
    pub values: Vec<usize>,
    pub n: usize,
    pub h: usize,
    pub c: usize,
    pub k: usize,
    /// Channels per modulation group.
    pub group_size: usize,
    /// Output width of the rigid convolution.
    pub c_out: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Worker threads; 1 keeps the single-threaded path.
    pub threads: usize,
}

impl SweepSpec {
    pub fn new(op: BenchOp, param: SweepParam, values: Vec<usize>) -> Self {
        SweepSpec {
            op,
            param,
            values,
            n: 4096,
            h: 16,
            c: 128,
            k: 15,
            group_size: 8,
            c_out: 128,
            trials: 7,
            warmup: 1,
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 5 {
            return Err(KpxError::Config(format!("at least 5 trials are needed, got {}", self.trials)));
        }
        if self.values.is_empty() {
            return Err(KpxError::Config("empty sweep".into()));
        }
        Ok(())
    }

    fn point(&self, v: usize) -> Point {
        let mut p = Point {
            n: self.n,
            h: self.h,
            c: self.c,
            k: self.k,
            group_size: self.group_size,
        };
        match self.param {
            SweepParam::K => p.k = v,
            SweepParam::N => p.n = v,
            SweepParam::H => p.h = v,
            SweepParam::C => p.c = v,
            SweepParam::G => p.group_size = v,
        }
        p
    }
}

#[derive(Clone, Copy, Debug)]
struct Point {
    n: usize,
    h: usize,
    c: usize,
    k: usize,
    group_size: usize,
}

/// Shell layout with `k` points: one shell up to 20 points, otherwise two
/// shells holding one and two thirds of the non-center points.
pub fn shells_for(k: usize) -> Result<Vec<usize>> {
    match k {
        0 | 1 => Err(KpxError::Config(format!("need at least 2 kernel points, got {k}"))),
        2..=20 => Ok(vec![1, k - 1]),
        _ => {
            let inner = (k - 1) / 3;
            Ok(vec![1, inner, k - 1 - inner])
        }
    }
}

/// One benchmark instance: random points in a unit cube with a search
/// radius chosen so that about `1.5·H` supports fall inside it.
pub struct Instance {
    pub points: Vec<Point3>,
    pub table: Arc<NeighborTable>,
    pub kernel: KernelDisposition,
    pub cell: f64,
}

impl Instance {
    pub fn generate(n: usize, h: usize, k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Point3> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random::<f64>())).collect();
        let radius = (1.5 * h as f64 / (n as f64 * 4.0 / 3.0 * std::f64::consts::PI)).cbrt();
        let kernel = optimize_disposition(&shells_for(k)?, 2.1, 0)?;
        let cell = radius / kernel.radius;
        let table = knn_truncated(&points, &points, &[n], &[n], h, radius)?;
        Ok(Instance {
            points,
            table: Arc::new(table),
            kernel,
            cell,
        })
    }

    pub fn influence(&self, mode: InfluenceMode) -> Result<InfluenceTable<f32>> {
        influence(&self.points, &self.points, &self.table, &self.kernel, self.cell, mode)
    }

    pub fn real_neighbors(&self) -> u64 {
        (0..self.table.n_queries).map(|i| self.table.real_count(i) as u64).sum()
    }
}

/// Expected multiply-add counts, by operation family, of one forward pass.
pub fn expected_ops(op: BenchOp, real_neighbors: u64, n: usize, c: usize, k: usize, group_size: usize, c_out: usize) -> OpCounter {
    let (n, c, k) = (n as u64, c as u64, k as u64);
    let mut out = OpCounter::default();
    match op {
        BenchOp::Kpconv => out.add(OpKind::KpconvDense, real_neighbors * k * c + n * k * c * c_out as u64),
        BenchOp::KpconvdFullsum => out.add(OpKind::KpconvdFullsum, real_neighbors * 2 * k * c),
        BenchOp::Kpconvd => out.add(OpKind::Kpconvd, real_neighbors * 2 * c),
        BenchOp::Kpconvx | BenchOp::Kpinv => {
            let per = if op == BenchOp::Kpconvx { 3 } else { 2 };
            out.add(op.kind(), real_neighbors * per * c);
            let cg = c / group_size as u64;
            out.add(OpKind::Matmul, n * c * c + n * c * k * cg);
        }
    }
    out
}

/// One swept value.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub value: usize,
    pub n: usize,
    pub h: usize,
    pub c: usize,
    pub k: usize,
    pub group_size: usize,
    pub real_neighbors: u64,
    /// Median influence-table construction time.
    pub influence_ms: f64,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub ops: OpCounter,
    pub expected: OpCounter,
    /// Bytes held by the forward graph plus neighbor and influence tables.
    pub memory_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub op: BenchOp,
    pub param: SweepParam,
    pub trials: usize,
    pub threads: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "op,param,value,n,h,c,k,group_size,threads,trials,real_neighbors,\
influence_ms,median_ms,mean_ms,std_ms,op_count,matmul_count,expected_op_count,expected_matmul_count,memory_bytes";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let kind = self.op.kind();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{},{},{},{},{}\n",
                self.op,
                self.param,
                r.value,
                r.n,
                r.h,
                r.c,
                r.k,
                r.group_size,
                self.threads,
                self.trials,
                r.real_neighbors,
                r.influence_ms,
                r.median_ms,
                r.mean_ms,
                r.std_ms,
                r.ops.get(kind),
                r.ops.get(OpKind::Matmul),
                r.expected.get(kind),
                r.expected.get(OpKind::Matmul),
                r.memory_bytes
            ));
        }
        out
    }

    /// Ratio of median times between the last and first swept values.
    pub fn median_ratio(&self) -> Option<f64> {
        let (a, b) = (self.rows.first()?, self.rows.last()?);
        Some(b.median_ms / a.median_ms)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

struct Inputs {
    x: Tensor<f32>,
    w: Tensor<f32>,
    w1: Tensor<f32>,
    w2: Tensor<f32>,
}

fn forward(op: BenchOp, p: &Point, inst: &Instance, infl: &Arc<InfluenceTable<f32>>, t: &Inputs) -> Result<usize> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t.x.clone());
    let w = g.constant(t.w.clone());
    let head = |g: &mut Graph<f32>| ModulationHead {
        w1: g.constant(t.w1.clone()),
        b1: None,
        w2: g.constant(t.w2.clone()),
        b2: None,
        num_kernels: p.k,
        group_size: p.group_size,
        slope: 0.1,
    };
    let y: Var = match op {
        BenchOp::Kpconv => kpconv_dense(&mut g, x, &inst.table, infl, w)?,
        BenchOp::KpconvdFullsum => kpconvd_fullsum(&mut g, x, &inst.table, infl, w)?,
        BenchOp::Kpconvd => kpconvd(&mut g, x, &inst.table, infl, w)?,
        BenchOp::Kpconvx => {
            let h = head(&mut g);
            kpconvx(&mut g, x, x, &inst.table, infl, w, &h)?
        }
        BenchOp::Kpinv => {
            let h = head(&mut g);
            kpinv(&mut g, x, x, &inst.table, infl, &h)?
        }
    };
    debug_assert_eq!(g.value(y).rows(), p.n);
    Ok(g.stored_scalars())
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Runs the sweep. Every swept value gets its own deterministic instance
/// derived from `spec.seed`; timings exclude `spec.warmup` runs.
pub fn sweep(spec: &SweepSpec) -> Result<BenchReport> {
    spec.validate()?;
    let previous = parallel::threads();
    parallel::set_threads(spec.threads);
    let result = run_sweep(spec);
    parallel::set_threads(previous);
    result
}

fn run_sweep(spec: &SweepSpec) -> Result<BenchReport> {
    let mut rows = Vec::with_capacity(spec.values.len());
    for &v in &spec.values {
        let p = spec.point(v);
        if p.c % p.group_size != 0 {
            return Err(KpxError::Config(format!(
                "{} channels are not divisible into groups of {}",
                p.c, p.group_size
            )));
        }
        let inst = Instance::generate(p.n, p.h, p.k, spec.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
        let cg = p.c / p.group_size;
        let w_shape = if spec.op == BenchOp::Kpconv {
            vec![p.k, p.c, spec.c_out]
        } else {
            vec![p.k, p.c]
        };
        let inputs = Inputs {
            x: random_tensor(&mut rng, &[p.n, p.c], 1.0),
            w: random_tensor(&mut rng, &w_shape, 0.5),
            w1: random_tensor(&mut rng, &[p.c, p.c], 0.1),
            w2: random_tensor(&mut rng, &[p.c, p.k * cg], 0.1),
        };

        let mut infl_times = Vec::with_capacity(spec.trials);
        let mut infl = None;
        for _ in 0..spec.trials {
            let t = Instant::now();
            let table = inst.influence(spec.op.mode())?;
            infl_times.push(ms(t));
            infl = Some(Arc::new(table));
        }
        let infl = infl.expect("at least one trial");

        for _ in 0..spec.warmup {
            forward(spec.op, &p, &inst, &infl, &inputs)?;
        }
        let mut times = Vec::with_capacity(spec.trials);
        let (mut ops, mut scalars) = (OpCounter::default(), 0);
        for trial in 0..spec.trials {
            let t = Instant::now();
            let (res, counted) = count_ops(|| forward(spec.op, &p, &inst, &infl, &inputs));
            times.push(ms(t));
            scalars = res?;
            if trial == 0 {
                ops = counted;
            }
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
        let real = inst.real_neighbors();
        let table_bytes = inst.table.indices.len() * std::mem::size_of::<usize>();
        let infl_bytes = infl.h.len() * 4 + infl.k_star.len() * std::mem::size_of::<usize>();
        rows.push(BenchRow {
            value: v,
            n: p.n,
            h: p.h,
            c: p.c,
            k: p.k,
            group_size: p.group_size,
            real_neighbors: real,
            influence_ms: median(&mut infl_times),
            median_ms: median(&mut times.clone()),
            mean_ms: mean,
            std_ms: var.sqrt(),
            ops,
            expected: expected_ops(spec.op, real, p.n, p.c, p.k, p.group_size, spec.c_out),
            memory_bytes: scalars * 4 + table_bytes + infl_bytes,
        });
        log::info!("{} {}={} median {:.3} ms", spec.op, spec.param, v, rows[rows.len() - 1].median_ms);
    }
    Ok(BenchReport {
        op: spec.op,
        param: spec.param,
        trials: spec.trials,
        threads: spec.threads,
        rows,
    })
}
