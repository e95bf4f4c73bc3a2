#![allow(dead_code)]

use std::sync::Arc;

use kpx::kernelgeo::{optimize_disposition, KernelDisposition, Point3};
use kpx::kpops::*;
use kpx::sampling::{knn_truncated, NeighborTable};
use kpx::tensor::{Graph, Tensor, Var};
use kpx::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..extent)))
        .collect()
}

/// `Σ y ⊙ R` for a fixed pseudo-random `R`, so that no gradient entry is
/// trivially symmetric.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let r = random_tensor(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients and central
/// differences (step 1e-5) of the scalar `f` over all entries of `inputs`.
///
/// Differences within the roundoff of the quotient, `100 eps |L| / h`, count
/// as agreement. Otherwise a missing entry is re-measured at half the step
/// and Richardson-extrapolated, which cancels the h^2 error of strongly
/// curved functions (batch norm over two rows). If that still misses and the
/// two estimates differ, a kink (leaky ReLU, max pooling, influence cutoff)
/// lies inside the stencil and the entry is left out; at most 1% of entries
/// may be left out.
pub fn grad_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    let value = g.value(loss).data()[0];
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_tensor(v).into_data()).collect();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut ins = inputs.to_vec();
    let mut central = |i: usize, e: usize, h: f64| {
        let x0 = inputs[i].data()[e];
        ins[i].data_mut()[e] = x0 + h;
        let lp = eval(&ins);
        ins[i].data_mut()[e] = x0 - h;
        let lm = eval(&ins);
        ins[i].data_mut()[e] = x0;
        (lp - lm) / (2.0 * h)
    };
    let h = 1e-5;
    let roundoff = 100.0 * f64::EPSILON * value.abs().max(1.0) / h;
    let mut worst = 0.0f64;
    let (mut total, mut kinks) = (0, 0);
    for i in 0..inputs.len() {
        for e in 0..inputs[i].len() {
            total += 1;
            let a = analytic[i][e];
            let n = central(i, e, h);
            if (a - n).abs() <= roundoff {
                continue;
            }
            let mut err = rel_err(a, n);
            if err > 1e-6 {
                let n2 = central(i, e, h / 2.0);
                err = err.min(rel_err(a, (4.0 * n2 - n) / 3.0));
                if err > 1e-6 && rel_err(n, n2) > 1e-6 && (n - n2).abs() > roundoff {
                    kinks += 1;
                    continue;
                }
            }
            worst = worst.max(err);
        }
    }
    assert!(kinks * 100 <= total, "{kinks} of {total} entries straddle a kink");
    worst
}

/// `[1, 6]` disposition with shell points on the axes at distance `r1`.
pub fn octahedron(r1: f64, radius: f64, sigma: f64) -> KernelDisposition {
    let mut positions = vec![[0.0; 3]];
    for axis in 0..3 {
        for s in [1.0, -1.0] {
            let mut p = [0.0; 3];
            p[axis] = s * r1;
            positions.push(p);
        }
    }
    KernelDisposition {
        positions,
        shell_counts: vec![1, 6],
        shell_radii: vec![r1],
        radius,
        sigma,
    }
}

fn d2(a: Point3, b: Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Random operator instance: one or two batch elements, queries equal to
/// supports, in a box where every query sees a few neighbors.
#[derive(Clone)]
pub struct Instance {
    pub points: Vec<Point3>,
    pub lengths: Vec<usize>,
    pub h: usize,
    pub radius: f64,
    pub kernel: KernelDisposition,
    pub table: Arc<NeighborTable>,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, h: usize, kernel: KernelDisposition) -> Self {
        let points = random_points(rng, n, 1.5);
        let lengths = if n >= 4 && rng.random_bool(0.5) {
            let a = n / 2;
            vec![a, n - a]
        } else {
            vec![n]
        };
        let radius = kernel.radius;
        let table = knn_truncated(&points, &points, &lengths, &lengths, h, radius).unwrap();
        Instance {
            points,
            lengths,
            h,
            radius,
            kernel,
            table: Arc::new(table),
        }
    }

    pub fn influence(&self, mode: InfluenceMode) -> Arc<InfluenceTable<f64>> {
        Arc::new(influence(&self.points, &self.points, &self.table, &self.kernel, 1.0, mode).unwrap())
    }

    /// Brute-force neighbor lists (real neighbors only).
    pub fn naive_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for &len in &self.lengths {
            for i in start..start + len {
                let mut c: Vec<(f64, usize)> = (start..start + len)
                    .map(|j| (d2(self.points[i], self.points[j]), j))
                    .filter(|&(d, _)| d <= self.radius * self.radius)
                    .collect();
                c.sort_by(|a, b| a.partial_cmp(b).unwrap());
                out.push(c.into_iter().take(self.h).map(|(_, j)| j).collect());
            }
            start += len;
        }
        out
    }

    fn offset(&self, i: usize, j: usize) -> Point3 {
        [0, 1, 2].map(|k| self.points[j][k] - self.points[i][k])
    }

    /// Linear influence of kernel point `k` on neighbor `j` of query `i`.
    pub fn h_full(&self, i: usize, j: usize, k: usize) -> f64 {
        let d = d2(self.offset(i, j), self.kernel.positions[k]).sqrt();
        (1.0 - d / self.kernel.sigma).max(0.0)
    }

    /// Nearest kernel point (ties to the smaller index) and its influence.
    pub fn nearest(&self, i: usize, j: usize) -> (usize, f64) {
        let o = self.offset(i, j);
        let mut best = 0;
        for k in 1..self.kernel.num_points() {
            if d2(o, self.kernel.positions[k]) < d2(o, self.kernel.positions[best]) {
                best = k;
            }
        }
        (best, self.h_full(i, j, best))
    }
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn naive_dense(inst: &Instance, f: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    inst.naive_neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut out = vec![0.0; cout];
            for &j in nb {
                for kk in 0..k {
                    let h = inst.h_full(i, j, kk);
                    for c in 0..cin {
                        for (o, v) in out.iter_mut().enumerate() {
                            *v += h * wd[(kk * cin + c) * cout + o] * f[j][c];
                        }
                    }
                }
            }
            out
        })
        .collect()
}

pub fn naive_fullsum(inst: &Instance, f: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    inst.naive_neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut out = vec![0.0; f[0].len()];
            for &j in nb {
                for (kk, wk) in w.iter().enumerate() {
                    let h = inst.h_full(i, j, kk);
                    for (c, v) in out.iter_mut().enumerate() {
                        *v += h * wk[c] * f[j][c];
                    }
                }
            }
            out
        })
        .collect()
}

/// Nearest-kernel modulated sum; `m[i][k][g]` may be all ones and `w`
/// all ones to obtain the plain depthwise and involution variants.
pub fn naive_nearest(
    inst: &Instance,
    f: &[Vec<f64>],
    w: Option<&[Vec<f64>]>,
    m: Option<&[Vec<Vec<f64>>]>,
    group_size: usize,
) -> Vec<Vec<f64>> {
    inst.naive_neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut out = vec![0.0; f[0].len()];
            for &j in nb {
                let (k, h) = inst.nearest(i, j);
                for (c, v) in out.iter_mut().enumerate() {
                    let wv = w.map_or(1.0, |w| w[k][c]);
                    let mv = m.map_or(1.0, |m| m[i][k][c / group_size]);
                    *v += h * mv * wv * f[j][c];
                }
            }
            out
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two-layer modulation MLP evaluated with plain loops; returns
/// `[N][K][C_g]`.
pub fn naive_modulations(
    center: &[Vec<f64>],
    w1: &[Vec<f64>],
    b1: &[f64],
    w2: &[Vec<f64>],
    b2: &[f64],
    k: usize,
    slope: f64,
) -> Vec<Vec<Vec<f64>>> {
    center
        .iter()
        .map(|x| {
            let c = x.len();
            let hidden: Vec<f64> = (0..c)
                .map(|o| {
                    let v = b1[o] + (0..c).map(|i| x[i] * w1[i][o]).sum::<f64>();
                    if v > 0.0 {
                        v
                    } else {
                        slope * v
                    }
                })
                .collect();
            let m = w2[0].len();
            let flat: Vec<f64> = (0..m)
                .map(|o| sigmoid(b2[o] + (0..c).map(|i| hidden[i] * w2[i][o]).sum::<f64>()))
                .collect();
            flat.chunks(m / k).map(|ch| ch.to_vec()).collect()
        })
        .collect()
}

// Operator fixtures.

/// Octahedron for even seeds, an optimized `[1, 14]` kernel for odd ones.
pub fn kernel(seed: u64) -> KernelDisposition {
    if seed % 2 == 0 {
        octahedron(0.3, 0.5, 0.5)
    } else {
        optimize_disposition(&[1, 14], 0.5, seed).unwrap()
    }
}

pub fn features(seed: u64, n: usize, c: usize) -> Tensor<f64> {
    random_tensor(&mut rng(seed), &[n, c], 1.0)
}

/// Value of a graph built by `f`.
pub fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let y = f(&mut g).unwrap();
    g.value(y).clone()
}

/// Modulation MLP weights.
pub struct ModHead {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

impl ModHead {
    pub fn random(seed: u64, c: usize, k: usize, cg: usize) -> Self {
        let mut r = rng(seed);
        ModHead {
            w1: random_tensor(&mut r, &[c, c], 0.8),
            b1: random_tensor(&mut r, &[c], 0.3),
            w2: random_tensor(&mut r, &[c, k * cg], 0.8),
            b2: random_tensor(&mut r, &[k * cg], 0.3),
        }
    }

    /// Shifts hidden biases so no pre-activation sits on the leaky kink,
    /// where central differences are meaningless.
    pub fn clear_kinks(&mut self, center: &Tensor<f64>) {
        let c = self.b1.len();
        for o in 0..c {
            for _ in 0..100 {
                let near_kink = (0..center.rows()).any(|i| {
                    let v: f64 = self.b1.data()[o]
                        + (0..c).map(|a| center.row(i)[a] * self.w1.data()[a * c + o]).sum::<f64>();
                    v.abs() < 1e-3
                });
                if !near_kink {
                    break;
                }
                self.b1.data_mut()[o] += 2e-3;
            }
        }
    }

    pub fn vars(&self, g: &mut Graph<f64>, k: usize, group_size: usize) -> ModulationHead {
        ModulationHead {
            w1: g.leaf(self.w1.clone(), true),
            b1: Some(g.leaf(self.b1.clone(), true)),
            w2: g.leaf(self.w2.clone(), true),
            b2: Some(g.leaf(self.b2.clone(), true)),
            num_kernels: k,
            group_size,
            slope: 0.1,
        }
    }

    pub fn naive(&self, center: &[Vec<f64>], k: usize) -> Vec<Vec<Vec<f64>>> {
        naive_modulations(
            center,
            &rows(&self.w1),
            self.b1.data(),
            &rows(&self.w2),
            self.b2.data(),
            k,
            0.1,
        )
    }
}

/// Outputs of all five operators on one instance.
pub fn apply_all(
    inst: &Instance,
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    head: &ModHead,
) -> Vec<Tensor<f64>> {
    let k = inst.kernel.num_points();
    let near = inst.influence(InfluenceMode::Nearest);
    let full = inst.influence(InfluenceMode::FullSum);
    let wd = random_tensor(&mut rng(k as u64), &[k, x.row_len(), 2], 1.0);
    vec![
        eval(|g| {
            let (xv, wv) = (g.leaf(x.clone(), false), g.leaf(wd.clone(), false));
            kpconv_dense(g, xv, &inst.table, &full, wv)
        }),
        eval(|g| {
            let (xv, wv) = (g.leaf(x.clone(), false), g.leaf(w.clone(), false));
            kpconvd_fullsum(g, xv, &inst.table, &full, wv)
        }),
        eval(|g| {
            let (xv, wv) = (g.leaf(x.clone(), false), g.leaf(w.clone(), false));
            kpconvd(g, xv, &inst.table, &near, wv)
        }),
        eval(|g| {
            let hv = head.vars(g, k, 2);
            let (xv, wv) = (g.leaf(x.clone(), false), g.leaf(w.clone(), false));
            kpconvx(g, xv, xv, &inst.table, &near, wv, &hv)
        }),
        eval(|g| {
            let hv = head.vars(g, k, 2);
            let xv = g.leaf(x.clone(), false);
            kpinv(g, xv, xv, &inst.table, &near, &hv)
        }),
    ]
}

pub fn setup(seed: u64) -> (Instance, Tensor<f64>, Tensor<f64>, ModHead) {
    let inst = Instance::random(&mut rng(seed), 40, 8, kernel(seed));
    let k = inst.kernel.num_points();
    let x = features(seed, 40, 4);
    let w = random_tensor(&mut rng(seed + 2), &[k, 4], 1.0);
    let head = ModHead::random(seed, 4, k, 2);
    (inst, x, w, head)
}

/// `inst` with new point positions and a neighbor table rebuilt for them.
pub fn rebuilt(inst: &Instance, points: Vec<[f64; 3]>) -> Instance {
    let table = knn_truncated(&points, &points, &inst.lengths, &inst.lengths, inst.h, inst.radius).unwrap();
    Instance {
        points,
        lengths: inst.lengths.clone(),
        h: inst.h,
        radius: inst.radius,
        kernel: inst.kernel.clone(),
        table: Arc::new(table),
    }
}

pub fn small(seed: u64) -> Instance {
    Instance::random(&mut rng(seed + 1000), 10, 5, kernel(seed))
}
