//! Time grid, seeded Brownian bundles and adapted-process containers.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::SpaceTag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_k`; the last node is the horizon exactly.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }
}

/// Brownian increments `ΔW_k ~ N(0, dt)` for every path, plus the running sums `W(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    stream_ids: Vec<u64>,
    sign: f64,
    increments: Vec<f64>,
    levels: Vec<f64>,
}

fn draw_path(seed: u64, stream: u64, sd: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = sd * z;
    }
}

fn cumulate(increments: &[f64], steps: usize) -> Vec<f64> {
    let paths = increments.len() / steps;
    let mut levels = vec![0.0; paths * (steps + 1)];
    levels
        .par_chunks_mut(steps + 1)
        .zip(increments.par_chunks(steps))
        .for_each(|(lv, inc)| {
            for k in 0..steps {
                lv[k + 1] = lv[k] + inc[k];
            }
        });
    levels
}

impl BrownianBundle {
    /// Counter-based generation: path `i` reads ChaCha stream `i` under key `seed`, so a
    /// path's increments do not depend on the path count or on thread scheduling.
    pub fn generate(grid: TimeGrid, paths: usize, seed: u64) -> Result<Self> {
        if paths == 0 {
            return Err(Error::InvalidArgument("at least one path is required".into()));
        }
        let m = grid.steps();
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; paths * m];
        increments
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, chunk)| draw_path(seed, i as u64, sd, chunk));
        let levels = cumulate(&increments, m);
        Ok(Self {
            grid,
            paths,
            seed,
            stream_ids: (0..paths as u64).collect(),
            sign: 1.0,
            increments,
            levels,
        })
    }

    /// Build from explicit increments (row per path).
    pub fn from_increments(grid: TimeGrid, increments: Vec<f64>, seed: u64) -> Result<Self> {
        let m = grid.steps();
        if increments.is_empty() || !increments.len().is_multiple_of(m) {
            return Err(Error::Dimension("increment count is not a multiple of steps".into()));
        }
        let paths = increments.len() / m;
        let levels = cumulate(&increments, m);
        Ok(Self {
            grid,
            paths,
            seed,
            stream_ids: (0..paths as u64).collect(),
            sign: 1.0,
            increments,
            levels,
        })
    }

    /// Sign-flipped copy.
    pub fn antithetic(&self) -> Self {
        let mut out = self.clone();
        out.sign = -self.sign;
        out.increments.iter_mut().for_each(|v| *v = -*v);
        out.levels.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// Sum `factor` consecutive increments: the same Brownian paths on a coarser grid.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let m = self.grid.steps();
        if factor == 0 || !m.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!("cannot coarsen {m} steps by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.horizon(), m / factor)?;
        let mut inc = Vec::with_capacity(self.increments.len() / factor);
        for path in self.increments.chunks(m) {
            for block in path.chunks(factor) {
                inc.push(block.iter().sum());
            }
        }
        let mut out = Self::from_increments(grid, inc, self.seed)?;
        out.stream_ids.clone_from(&self.stream_ids);
        out.sign = self.sign;
        Ok(out)
    }

    /// First `paths` paths of the bundle.
    pub fn truncate_paths(&self, paths: usize) -> Self {
        let paths = paths.min(self.paths).max(1);
        let m = self.grid.steps();
        Self {
            grid: self.grid,
            paths,
            seed: self.seed,
            stream_ids: self.stream_ids[..paths].to_vec(),
            sign: self.sign,
            increments: self.increments[..paths * m].to_vec(),
            levels: self.levels[..paths * (m + 1)].to_vec(),
        }
    }

    /// Copy whose increments with index `≥ from_step` are redrawn from `seed`.
    pub fn with_future_resampled(&self, from_step: usize, seed: u64) -> Self {
        let m = self.grid.steps();
        let sd = self.grid.dt().sqrt();
        let mut inc = self.increments.clone();
        inc.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            if from_step < m {
                draw_path(seed, i as u64, sd, &mut row[from_step..]);
            }
        });
        let mut out = Self::from_increments(self.grid, inc, self.seed).expect("same shape");
        out.stream_ids.clone_from(&self.stream_ids);
        out
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_ids(&self) -> &[u64] {
        &self.stream_ids
    }

    pub fn is_antithetic(&self) -> bool {
        self.sign < 0.0
    }

    pub fn increment(&self, path: usize, k: usize) -> f64 {
        self.increments[path * self.grid.steps() + k]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let m = self.grid.steps();
        &self.increments[path * m..(path + 1) * m]
    }

    /// `W(t_k)` on `path`.
    pub fn level(&self, path: usize, k: usize) -> f64 {
        self.levels[path * (self.grid.steps() + 1) + k]
    }

    pub fn path_levels(&self, path: usize) -> &[f64] {
        let m = self.grid.steps() + 1;
        &self.levels[path * m..(path + 1) * m]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    const MAGIC: &'static [u8; 8] = b"RSOCBB01";

    /// Binary dump: magic, seed, paths, steps (u64 LE), horizon (f64 LE), then increments.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.paths as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps() as u64).to_le_bytes())?;
        w.write_all(&self.grid.horizon().to_le_bytes())?;
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Io("not a Brownian bundle dump".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let seed = u64::from_le_bytes(next(&mut r)?);
        let paths = u64::from_le_bytes(next(&mut r)?) as usize;
        let steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let horizon = f64::from_le_bytes(next(&mut r)?);
        let grid = TimeGrid::new(horizon, steps)?;
        let mut inc = Vec::with_capacity(paths * steps);
        for _ in 0..paths * steps {
            inc.push(f64::from_le_bytes(next(&mut r)?));
        }
        Self::from_increments(grid, inc, seed)
    }
}

/// Grid-valued process: `values[(path * (M+1) + k) * dim + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    paths: usize,
    steps: usize,
    dim: usize,
    tag: SpaceTag,
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(paths: usize, steps: usize, dim: usize, tag: SpaceTag) -> Self {
        Self { paths, steps, dim, tag, values: vec![0.0; paths * (steps + 1) * dim] }
    }

    /// Fill every path independently: `fill(path, row)` writes `(M+1) * dim` values.
    pub fn from_path_fn<F>(paths: usize, steps: usize, dim: usize, tag: SpaceTag, fill: F) -> Self
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let mut p = Self::zeros(paths, steps, dim, tag);
        let stride = (steps + 1) * dim;
        if stride > 0 {
            p.values.par_chunks_mut(stride).enumerate().for_each(|(i, row)| fill(i, row));
        }
        p
    }

    /// Like [`from_path_fn`](Self::from_path_fn) with a fallible fill.
    pub fn try_from_path_fn<F>(
        paths: usize,
        steps: usize,
        dim: usize,
        tag: SpaceTag,
        fill: F,
    ) -> Result<Self>
    where
        F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
    {
        let mut p = Self::zeros(paths, steps, dim, tag);
        let stride = (steps + 1) * dim;
        if stride > 0 {
            let errors: Vec<Error> = p
                .values
                .par_chunks_mut(stride)
                .enumerate()
                .filter_map(|(i, row)| fill(i, row).err())
                .collect();
            if let Some(e) = first_by_step(errors) {
                return Err(e);
            }
        }
        Ok(p)
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tag(&self) -> SpaceTag {
        self.tag
    }

    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.steps + 1) + k) * self.dim;
        &self.values[o..o + self.dim]
    }

    pub fn at_mut(&mut self, path: usize, k: usize) -> &mut [f64] {
        let o = (path * (self.steps + 1) + k) * self.dim;
        &mut self.values[o..o + self.dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let s = (self.steps + 1) * self.dim;
        &self.values[path * s..(path + 1) * s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `a·self + b·other`, pathwise.
    pub fn combine(&self, a: f64, other: &AdaptedProcess, b: f64) -> Result<AdaptedProcess> {
        self.check_shape(other)?;
        let mut out = self.clone();
        out.values.iter_mut().zip(&other.values).for_each(|(x, y)| *x = a * *x + b * *y);
        Ok(out)
    }

    /// `self += b * other` without a copy.
    pub fn add_scaled(&mut self, other: &AdaptedProcess, b: f64) -> Result<()> {
        self.check_shape(other)?;
        self.values.iter_mut().zip(&other.values).for_each(|(x, y)| *x += b * *y);
        Ok(())
    }

    pub fn check_shape(&self, other: &AdaptedProcess) -> Result<()> {
        if self.paths != other.paths || self.steps != other.steps || self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "process shapes differ: ({}, {}, {}) vs ({}, {}, {})",
                self.paths, self.steps, self.dim, other.paths, other.steps, other.dim
            )));
        }
        Ok(())
    }

    /// True when every path carries the same values bit for bit.
    pub fn is_path_independent(&self) -> bool {
        let first = self.path(0);
        (1..self.paths).all(|i| self.path(i) == first)
    }

    /// Cross-path mean of coordinate `i` at step `k`.
    pub fn mean(&self, k: usize, i: usize) -> f64 {
        let s: f64 = (0..self.paths).map(|p| self.at(p, k)[i]).sum();
        s / self.paths as f64
    }

    /// `max_k (E‖self(t_k) - other(t_k)‖²)^{1/2}` with weights `w` (unit when empty).
    pub fn sup_rms_distance(&self, other: &AdaptedProcess, w: &[f64]) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self.rms_profile(Some(other), w).into_iter().fold(0.0, f64::max))
    }

    /// `(E‖self(t_k) − other(t_k)‖²)^{1/2}` for every k.
    pub fn rms_profile(&self, other: Option<&AdaptedProcess>, w: &[f64]) -> Vec<f64> {
        (0..=self.steps)
            .map(|k| {
                let s: f64 = (0..self.paths)
                    .map(|p| {
                        let a = self.at(p, k);
                        (0..self.dim)
                            .map(|i| {
                                let d = a[i] - other.map_or(0.0, |o| o.at(p, k)[i]);
                                let wi = w.get(i).copied().unwrap_or(1.0);
                                wi * wi * d * d
                            })
                            .sum::<f64>()
                    })
                    .sum();
                (s / self.paths as f64).sqrt()
            })
            .collect()
    }
}

/// The error with the smallest step wins so reports are stable across thread counts.
pub(crate) fn first_by_step(mut errors: Vec<Error>) -> Option<Error> {
    errors.sort_by(|a, b| {
        let key = |e: &Error| match e {
            Error::Divergence { step, .. } => *step,
            _ => usize::MAX,
        };
        key(a).cmp(&key(b))
    });
    errors.into_iter().next()
}

/// Sample mean with standard error of the mean, summed in index order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_dev: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std_dev = var.sqrt();
        Self { mean, std_dev, std_err: std_dev / n.sqrt() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.node(3), 1.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn clt_bound_on_increment_mean() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        let b = BrownianBundle::generate(g, 100_000, 42).unwrap();
        let mean = b.increments().iter().sum::<f64>().abs() / b.paths() as f64;
        assert!(mean < 4.0 * g.dt().sqrt() / (b.paths() as f64).sqrt());
    }

    #[test]
    fn increment_variance_two_steps() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let b = BrownianBundle::generate(g, 100_000, 7).unwrap();
        let e = Estimate::from_samples(b.increments());
        let var = e.std_dev * e.std_dev;
        assert!((0.45..=0.55).contains(&var), "{var}");
    }

    #[test]
    fn regeneration_identical() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = BrownianBundle::generate(g, 64, 3).unwrap();
        let b = BrownianBundle::generate(g, 64, 3).unwrap();
        assert_eq!(a, b);
        let c = BrownianBundle::generate(g, 128, 3).unwrap();
        assert_eq!(a.path_increments(17), c.path_increments(17));
    }

    #[test]
    fn zero_paths_rejected() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        assert!(BrownianBundle::generate(g, 0, 1).is_err());
    }

    #[test]
    fn antithetic_involution_and_odd_mean() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = BrownianBundle::generate(g, 1000, 9).unwrap();
        let f = b.antithetic();
        assert_eq!(f.antithetic(), b);
        let m: f64 = (0..b.paths()).map(|p| 0.5 * (b.level(p, 4) + f.level(p, 4))).sum();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn coarsen_keeps_endpoints() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let b = BrownianBundle::generate(g, 10, 5).unwrap();
        let c = b.coarsen(4).unwrap();
        assert_eq!(c.grid().steps(), 2);
        for p in 0..10 {
            assert!((c.level(p, 2) - b.level(p, 8)).abs() < 1e-14);
        }
        assert!(b.coarsen(3).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let g = TimeGrid::new(0.5, 5).unwrap();
        let b = BrownianBundle::generate(g, 7, 11).unwrap();
        let mut buf = Vec::new();
        b.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 8 * 35);
        let r = BrownianBundle::read_binary(&buf[..]).unwrap();
        assert_eq!(r.increments(), b.increments());
        assert_eq!(r.seed(), 11);
    }

    #[test]
    fn future_resampling_keeps_past() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let b = BrownianBundle::generate(g, 5, 1).unwrap();
        let r = b.with_future_resampled(6, 99);
        for p in 0..5 {
            assert_eq!(&b.path_increments(p)[..6], &r.path_increments(p)[..6]);
            assert_ne!(&b.path_increments(p)[6..], &r.path_increments(p)[6..]);
        }
    }
}
