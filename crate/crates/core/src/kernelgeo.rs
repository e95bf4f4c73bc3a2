//! Multi-shell kernel point dispositions.
//!
//! A disposition `[1, N₁, …, N_s]` has one point fixed at the origin and
//! `N_j` points constrained to a sphere of radius `r_j = 2j/(2s+1)·r`.
//! Points are spread by projected gradient descent on the pairwise
//! repulsive energy `Σ_k Σ_{l≠k} 1/‖x_l − x_k‖`: forces are computed,
//! their radial component is removed, and every moved point is pulled back
//! onto its shell sphere.
//!
//! The optimisation runs on the unit-radius kernel and the result is scaled
//! by `r`, which makes the output exactly homogeneous in `r`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{KpxError, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct KernelDisposition {
    /// Kernel point positions; index 0 is the center.
    pub positions: Vec<Point3>,
    /// `[1, N₁, …, N_s]`.
    pub shell_counts: Vec<usize>,
    /// `r_j` for `j = 1..=s`.
    pub shell_radii: Vec<f64>,
    pub radius: f64,
    /// Influence distance; equal to `radius`.
    pub sigma: f64,
}

impl KernelDisposition {
    pub fn num_points(&self) -> usize {
        self.positions.len()
    }

    pub fn num_shells(&self) -> usize {
        self.shell_counts.len() - 1
    }

    /// Shell index of every kernel point (0 for the center).
    pub fn shell_index(&self) -> Vec<usize> {
        self.shell_counts
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect()
    }

    /// Expected norm of every kernel point.
    fn target_norms(&self) -> Vec<f64> {
        self.shell_index()
            .into_iter()
            .map(|j| if j == 0 { 0.0 } else { self.shell_radii[j - 1] })
            .collect()
    }

    /// Nearest kernel point to `p` and the distance to it. Ties go to the
    /// smaller index.
    pub fn nearest(&self, p: Point3) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, x) in self.positions.iter().enumerate() {
            let d = dist2(p, *x);
            if d < best.1 {
                best = (k, d);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// Copy with every position multiplied by `a` (radius, radii and σ too).
    pub fn scaled(&self, a: f64) -> Self {
        KernelDisposition {
            positions: self.positions.iter().map(|p| p.map(|c| c * a)).collect(),
            shell_counts: self.shell_counts.clone(),
            shell_radii: self.shell_radii.iter().map(|r| r * a).collect(),
            radius: self.radius * a,
            sigma: self.sigma * a,
        }
    }

    /// Copy with σ replaced.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        KernelDisposition {
            sigma,
            ..self.clone()
        }
    }

    pub fn energy(&self) -> f64 {
        total_energy(&self.positions)
    }

    /// Text form: `K s r sigma`, the shell counts, then one
    /// `x y z shell_index` line per point with 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.num_points(),
            self.num_shells(),
            sig9(self.radius),
            sig9(self.sigma)
        );
        let counts: Vec<String> = self.shell_counts.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}", counts.join(" "));
        for (p, j) in self.positions.iter().zip(self.shell_index()) {
            let _ = writeln!(out, "{} {} {} {}", sig9(p[0]), sig9(p[1]), sig9(p[2]), j);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| KpxError::Unsupported(format!("kernel file: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty".into()))?
            .split_whitespace()
            .collect();
        if head.len() != 4 {
            return Err(bad(format!("header needs `K s r sigma`, got {head:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
        let (k, s, radius, sigma) = (int(head[0])?, int(head[1])?, num(head[2])?, num(head[3])?);
        let shell_counts = lines
            .next()
            .ok_or_else(|| bad("missing shell counts".into()))?
            .split_whitespace()
            .map(int)
            .collect::<Result<Vec<_>>>()?;
        if shell_counts.len() != s + 1 || shell_counts.iter().sum::<usize>() != k {
            return Err(bad(format!("shell counts {shell_counts:?} do not match K={k}, s={s}")));
        }
        let mut positions = Vec::with_capacity(k);
        for i in 0..k {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("expected {k} points, found {i}")))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("point line `{line}`")));
            }
            positions.push([num(f[0])?, num(f[1])?, num(f[2])?]);
        }
        Ok(KernelDisposition {
            positions,
            shell_radii: shell_radii(radius, s)?,
            shell_counts,
            radius,
            sigma,
        })
    }
}

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

#[inline]
pub(crate) fn dist2(a: Point3, b: Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Shell radii `2j/(2s+1)·r` for `j = 1..=s`.
pub fn shell_radii(r: f64, shells: usize) -> Result<Vec<f64>> {
    if shells == 0 {
        return Err(KpxError::contract("a disposition needs at least one shell"));
    }
    if !(r > 0.0) {
        return Err(KpxError::contract(format!("kernel radius must be positive, got {r}")));
    }
    let denom = (2 * shells + 1) as f64;
    Ok((1..=shells).map(|j| 2.0 * j as f64 / denom * r).collect())
}

/// `Σ_k Σ_{l≠k} 1/‖x_l − x_k‖` (every pair counted twice).
pub fn total_energy(positions: &[Point3]) -> f64 {
    let mut e = 0.0;
    for (i, a) in positions.iter().enumerate() {
        for b in &positions[i + 1..] {
            e += 2.0 / dist2(*a, *b).sqrt();
        }
    }
    e
}

/// Step schedule of the constrained descent, in units of the kernel radius.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub step: f64,
    /// Largest displacement of one point in one step.
    pub clip: f64,
    /// Convergence threshold on the per-point tangential gradient norm.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: 1e-2,
            clip: 0.1,
            tolerance: 1e-5,
            max_iterations: 10_000,
        }
    }
}

/// Descent state after the last iteration.
#[derive(Clone, Debug)]
pub struct KernelOptimizerState {
    pub step: f64,
    pub iteration: usize,
    pub energy: f64,
    /// Tangential forces (negative projected gradient), unit-radius scale.
    pub forces: Vec<Point3>,
}

#[derive(Clone, Debug)]
pub struct OptimizeReport {
    pub converged: bool,
    pub state: KernelOptimizerState,
    /// Energy after every accepted step, on the unit-radius kernel.
    pub energy_trace: Vec<f64>,
    pub rejitters: usize,
}

/// Optimised disposition with the default schedule.
pub fn optimize_disposition(shell_counts: &[usize], r: f64, seed: u64) -> Result<KernelDisposition> {
    optimize_disposition_with(shell_counts, r, seed, &OptimizerConfig::default()).map(|(d, _)| d)
}

pub fn optimize_disposition_with(
    shell_counts: &[usize],
    r: f64,
    seed: u64,
    cfg: &OptimizerConfig,
) -> Result<(KernelDisposition, OptimizeReport)> {
    if shell_counts.first() != Some(&1) {
        return Err(KpxError::contract(format!(
            "shell counts must start with the lone center point, got {shell_counts:?}"
        )));
    }
    if shell_counts.iter().any(|&n| n == 0) {
        return Err(KpxError::contract(format!("empty shell in {shell_counts:?}")));
    }
    let radii = shell_radii(1.0, shell_counts.len() - 1)?;
    if !(r > 0.0) {
        return Err(KpxError::contract(format!("kernel radius must be positive, got {r}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = vec![0.0];
    let mut x: Vec<Point3> = vec![[0.0; 3]];
    for (j, &n) in shell_counts[1..].iter().enumerate() {
        for _ in 0..n {
            x.push(random_on_sphere(&mut rng, radii[j]));
            target.push(radii[j]);
        }
    }

    let mut rejitters = 0;
    while let Some(i) = collapsed(&x) {
        x[i] = random_on_sphere(&mut rng, target[i]);
        rejitters += 1;
    }
    let mut energy = total_energy(&x);
    let mut grad = projected_gradient(&x);
    let mut step = cfg.step;
    let mut trace = vec![energy];
    let mut converged = false;
    let mut iteration = 0;
    while iteration < cfg.max_iterations {
        if grad.iter().map(|g| norm(*g)).fold(0.0, f64::max) < cfg.tolerance {
            converged = true;
            break;
        }
        iteration += 1;
        let mut cand = x.clone();
        for i in 1..x.len() {
            let mut mv = grad[i].map(|g| -step * g);
            let len = norm(mv);
            if len > cfg.clip {
                mv = mv.map(|c| c * cfg.clip / len);
            }
            let p = [x[i][0] + mv[0], x[i][1] + mv[1], x[i][2] + mv[2]];
            cand[i] = project(p, target[i]);
        }
        if let Some(i) = collapsed(&cand) {
            // Two points met: jitter one of them and restart from there.
            x = cand;
            x[i] = random_on_sphere(&mut rng, target[i]);
            rejitters += 1;
            energy = total_energy(&x);
            grad = projected_gradient(&x);
            trace.push(energy);
            continue;
        }
        let e = total_energy(&cand);
        if e <= energy {
            x = cand;
            energy = e;
            grad = projected_gradient(&x);
            trace.push(energy);
            step *= 1.1;
        } else {
            step *= 0.5;
            if step < 1e-15 {
                // no descent left at floating-point precision
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "kernel optimisation for {shell_counts:?} stopped after {iteration} iterations without converging"
        );
    }

    let mut positions = vec![[0.0; 3]];
    for i in 1..x.len() {
        positions.push(project(x[i], target[i] * r));
    }
    let disp = KernelDisposition {
        positions,
        shell_counts: shell_counts.to_vec(),
        shell_radii: shell_radii(r, shell_counts.len() - 1)?,
        radius: r,
        sigma: r,
    };
    let report = OptimizeReport {
        converged,
        state: KernelOptimizerState {
            step,
            iteration,
            energy,
            forces: grad.iter().map(|g| g.map(|c| -c)).collect(),
        },
        energy_trace: trace,
        rejitters,
    };
    Ok((disp, report))
}

fn random_on_sphere(rng: &mut ChaCha8Rng, radius: f64) -> Point3 {
    loop {
        let v: Point3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(v);
        if n > 1e-9 {
            return v.map(|c| c * radius / n);
        }
    }
}

fn project(p: Point3, radius: f64) -> Point3 {
    let n = norm(p);
    if radius == 0.0 || n == 0.0 {
        [0.0; 3]
    } else {
        p.map(|c| c * radius / n)
    }
}

fn collapsed(x: &[Point3]) -> Option<usize> {
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            if dist2(x[i], x[j]) < 1e-24 {
                return Some(j);
            }
        }
    }
    None
}

/// Gradient of the total energy with radial components removed; zero for
/// the center point.
fn projected_gradient(x: &[Point3]) -> Vec<Point3> {
    let mut g = vec![[0.0; 3]; x.len()];
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let d = [x[i][0] - x[j][0], x[i][1] - x[j][1], x[i][2] - x[j][2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let f = -2.0 / (r2 * r2.sqrt());
            for c in 0..3 {
                g[i][c] += f * d[c];
                g[j][c] -= f * d[c];
            }
        }
    }
    g[0] = [0.0; 3];
    for i in 1..x.len() {
        let n = norm(x[i]);
        let u = x[i].map(|c| c / n);
        let radial = g[i][0] * u[0] + g[i][1] * u[1] + g[i][2] * u[2];
        for c in 0..3 {
            g[i][c] -= radial * u[c];
        }
    }
    g
}

/// Invariant metrics of a disposition.
#[derive(Clone, Debug, PartialEq)]
pub struct DispositionReport {
    pub shell_error_max: f64,
    /// Smallest distance between two non-center points.
    pub min_pairwise_distance: f64,
    pub center_offset: f64,
    pub shell_radii_error: f64,
}

impl DispositionReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.shell_error_max < tol && self.center_offset == 0.0 && self.shell_radii_error < tol
    }
}

pub fn verify_disposition(d: &KernelDisposition) -> DispositionReport {
    let shell_error_max = d
        .positions
        .iter()
        .zip(d.target_norms())
        .skip(1)
        .map(|(p, t)| (norm(*p) - t).abs())
        .fold(0.0, f64::max);
    let mut min_pairwise_distance = f64::INFINITY;
    let shell = d.positions.get(1..).unwrap_or(&[]);
    for (i, a) in shell.iter().enumerate() {
        for b in &shell[i + 1..] {
            min_pairwise_distance = min_pairwise_distance.min(dist2(*a, *b).sqrt());
        }
    }
    let shell_radii_error = match shell_radii(d.radius, d.num_shells()) {
        Ok(expected) if expected.len() == d.shell_radii.len() => expected
            .iter()
            .zip(&d.shell_radii)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    };
    DispositionReport {
        shell_error_max,
        min_pairwise_distance,
        center_offset: d.positions.first().map_or(f64::INFINITY, |p| norm(*p)),
        shell_radii_error,
    }
}

/// Nearest-kernel assignment on a regular probe grid inside the kernel
/// sphere.
#[derive(Clone, Debug)]
pub struct RegionMap {
    pub resolution: usize,
    pub probes: Vec<Point3>,
    pub region: Vec<usize>,
}

impl RegionMap {
    /// Probe count per kernel point.
    pub fn histogram(&self, num_kernel_points: usize) -> Vec<usize> {
        let mut h = vec![0; num_kernel_points];
        for &r in &self.region {
            h[r] += 1;
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,region\n");
        for (p, r) in self.probes.iter().zip(&self.region) {
            let _ = writeln!(out, "{},{},{},{}", p[0], p[1], p[2], r);
        }
        out
    }
}

/// Cell centers of a `resolution³` grid over `[-r, r]³`, restricted to the
/// kernel sphere, each labelled with its nearest kernel point.
pub fn nearest_kernel_regions(d: &KernelDisposition, resolution: usize) -> Result<RegionMap> {
    if resolution < 8 {
        return Err(KpxError::contract(format!(
            "probe resolution must be at least 8, got {resolution}"
        )));
    }
    let r = d.radius;
    let cell = 2.0 * r / resolution as f64;
    let coord = |i: usize| -r + (i as f64 + 0.5) * cell;
    let mut probes = Vec::new();
    let mut region = Vec::new();
    for i in 0..resolution {
        for j in 0..resolution {
            for k in 0..resolution {
                let p = [coord(i), coord(j), coord(k)];
                if norm(p) <= r {
                    region.push(d.nearest(p).0);
                    probes.push(p);
                }
            }
        }
    }
    Ok(RegionMap {
        resolution,
        probes,
        region,
    })
}
