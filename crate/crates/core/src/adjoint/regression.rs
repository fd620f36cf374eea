//! Least-squares conditional expectations on polynomial features.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{AdaptedProcess, BrownianBundle};

/// Paths per reduction block; fixed so sums do not depend on the thread count.
const BLOCK: usize = 512;

/// Feature set for regressions at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSpec {
    /// Total degree in the state coordinates.
    pub degree: usize,
    /// Powers of `W(t_k)` appended; needed when the reference control depends on the path.
    pub brownian_degree: usize,
    /// Quadratic state terms are dropped when the basis would exceed this size.
    pub max_size: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { degree: 2, brownian_degree: 0, max_size: 64 }
    }
}

impl BasisSpec {
    pub fn with_brownian(mut self, degree: usize) -> Self {
        self.brownian_degree = degree;
        self
    }
}

/// Standardized design matrix for one step with a pseudo-inverse of its Gram matrix.
#[derive(Debug, Clone)]
pub struct Regressor {
    paths: usize,
    cols: usize,
    design: Vec<f64>,
    gram_pinv: DMatrix<f64>,
}

/// Raw feature columns before standardization: state monomials then `W` powers.
fn raw_features(spec: &BasisSpec, x: &[f64], w: f64, active: &[usize], out: &mut Vec<f64>) {
    out.clear();
    if spec.degree >= 1 {
        out.extend(active.iter().map(|&i| x[i]));
    }
    if spec.degree >= 2 {
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a..] {
                out.push(x[i] * x[j]);
            }
        }
    }
    let mut pw = 1.0;
    for _ in 0..spec.brownian_degree {
        pw *= w;
        out.push(pw);
    }
}

impl Regressor {
    /// Features of `x(t_k)` and `W(t_k)`; coordinates that do not vary across paths are
    /// left out since the constant column already spans them.
    pub fn at_step(spec: &BasisSpec, x: &AdaptedProcess, bundle: &BrownianBundle, k: usize) -> Result<Self> {
        let paths = x.paths();
        let n = x.dim();
        let first = x.at(0, k);
        let active: Vec<usize> =
            (0..n).filter(|&i| (1..paths).any(|p| x.at(p, k)[i] != first[i])).collect();
        let mut spec = *spec;
        let quad = active.len() * (active.len() + 1) / 2;
        if spec.degree >= 2 && 1 + active.len() + quad + spec.brownian_degree > spec.max_size {
            spec.degree = 1;
        }
        let mut scratch = Vec::new();
        raw_features(&spec, x.at(0, k), bundle.level(0, k), &active, &mut scratch);
        let raw_cols = scratch.len();
        let mut raw = vec![0.0; paths * raw_cols];
        raw.par_chunks_mut(raw_cols.max(1)).enumerate().for_each(|(p, row)| {
            if raw_cols == 0 {
                return;
            }
            let mut f = Vec::with_capacity(raw_cols);
            raw_features(&spec, x.at(p, k), bundle.level(p, k), &active, &mut f);
            row.copy_from_slice(&f);
        });
        Self::from_raw(paths, raw_cols, raw)
    }

    /// Design from explicit feature rows (`paths × raw_cols`), plus a constant column.
    pub fn from_raw(paths: usize, raw_cols: usize, raw: Vec<f64>) -> Result<Self> {
        // standardize; drop columns without spread
        let mut keep = Vec::new();
        let mut centre = Vec::new();
        let mut scale = Vec::new();
        for c in 0..raw_cols {
            let mean = (0..paths).map(|p| raw[p * raw_cols + c]).sum::<f64>() / paths as f64;
            let var = (0..paths).map(|p| (raw[p * raw_cols + c] - mean).powi(2)).sum::<f64>() / paths as f64;
            let sd = var.sqrt();
            if sd > 1e-14 * (1.0 + mean.abs()) {
                keep.push(c);
                centre.push(mean);
                scale.push(sd);
            }
        }
        let cols = 1 + keep.len();
        if paths < cols {
            return Err(Error::RankDeficient { paths, basis: cols });
        }
        let mut design = vec![0.0; paths * cols];
        design.par_chunks_mut(cols).enumerate().for_each(|(p, row)| {
            row[0] = 1.0;
            for (j, &c) in keep.iter().enumerate() {
                row[1 + j] = (raw[p * raw_cols + c] - centre[j]) / scale[j];
            }
        });
        let gram = blocked_sum(paths, cols * cols, |p, acc| {
            let row = &design[p * cols..(p + 1) * cols];
            for i in 0..cols {
                for j in 0..cols {
                    acc[i * cols + j] += row[i] * row[j];
                }
            }
        });
        let g = DMatrix::from_row_slice(cols, cols, &gram);
        let svd = g.svd(true, true);
        let smax = svd.singular_values.max();
        let gram_pinv = svd
            .pseudo_inverse(1e-11 * smax.max(f64::MIN_POSITIVE))
            .map_err(|_| Error::RankDeficient { paths, basis: cols })?;
        Ok(Self { paths, cols, design, gram_pinv })
    }

    pub fn size(&self) -> usize {
        self.cols
    }

    /// Fitted conditional expectations of every column of `targets` (`paths × width`).
    pub fn project(&self, targets: &[f64], width: usize) -> Result<Vec<f64>> {
        if targets.len() != self.paths * width {
            return Err(Error::Dimension("regression targets do not match the design".into()));
        }
        let cols = self.cols;
        let xty = blocked_sum(self.paths, cols * width, |p, acc| {
            let row = &self.design[p * cols..(p + 1) * cols];
            let t = &targets[p * width..(p + 1) * width];
            for i in 0..cols {
                let ri = row[i];
                for j in 0..width {
                    acc[i * width + j] += ri * t[j];
                }
            }
        });
        let rhs = DMatrix::from_row_slice(cols, width, &xty);
        let coef = &self.gram_pinv * rhs;
        if coef.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 0, time: f64::NAN, detail: "non-finite regression".into() });
        }
        let mut out = vec![0.0; self.paths * width];
        out.par_chunks_mut(width.max(1)).enumerate().for_each(|(p, o)| {
            let row = &self.design[p * cols..(p + 1) * cols];
            for j in 0..width {
                o[j] = (0..cols).map(|i| row[i] * coef[(i, j)]).sum();
            }
        });
        Ok(out)
    }

    /// Single-target convenience.
    pub fn project_one(&self, target: &[f64]) -> Result<Vec<f64>> {
        self.project(target, 1)
    }
}

/// `Σ_p f(p)` over fixed-size blocks, summed in block order.
pub(crate) fn blocked_sum<F>(paths: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let blocks: Vec<Vec<f64>> = (0..paths.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; len];
            for p in b * BLOCK..((b + 1) * BLOCK).min(paths) {
                f(p, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for b in blocks {
        total.iter_mut().zip(&b).for_each(|(t, v)| *t += v);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;
    use crate::spaces::SpaceTag;

    #[test]
    fn recovers_polynomial_exactly() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = BrownianBundle::generate(g, 500, 3).unwrap();
        let x = AdaptedProcess::from_path_fn(500, 4, 2, SpaceTag::H, |p, row| {
            for k in 0..=4 {
                row[2 * k] = b.level(p, k);
                row[2 * k + 1] = (p % 7) as f64;
            }
        });
        let r = Regressor::at_step(&BasisSpec::default(), &x, &b, 2).unwrap();
        let target: Vec<f64> = (0..500)
            .map(|p| {
                let v = x.at(p, 2);
                1.0 + 2.0 * v[0] - v[0] * v[1] + 0.5 * v[1] * v[1]
            })
            .collect();
        let fit = r.project_one(&target).unwrap();
        for (a, t) in fit.iter().zip(&target) {
            assert!((a - t).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_state_gives_sample_mean() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let b = BrownianBundle::generate(g, 200, 1).unwrap();
        let x = AdaptedProcess::zeros(200, 2, 1, SpaceTag::H);
        let r = Regressor::at_step(&BasisSpec::default(), &x, &b, 1).unwrap();
        assert_eq!(r.size(), 1);
        let t: Vec<f64> = (0..200).map(|p| p as f64).collect();
        let fit = r.project_one(&t).unwrap();
        assert!((fit[0] - 99.5).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_reported() {
        let raw: Vec<f64> = (0..6).map(|v| v as f64 * 0.37).collect();
        let err = Regressor::from_raw(2, 3, raw).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { paths: 2, .. }));
    }
}
