//! Malliavin derivatives of scheme-generated processes, their diagonal
//! approximation `∇φ = D⁺φ + D⁻φ`, and Clark–Ocone checks.
//!
//! On the grid, `D_s φ(t_k)` for `s ∈ [t_l, t_{l+1})` is the derivative of `φ_k` with
//! respect to the increment `ΔW_l`. It vanishes unless `l < k`, so adaptedness is built
//! into the storage: a band of lags `1..=band` behind each node.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::Regressor;
use crate::error::{Error, Result};
use crate::forward::{Linearization, StateEnsemble, VariationalEnsemble};
use crate::paths::{AdaptedProcess, BrownianBundle, Estimate, TimeGrid};
use crate::scenario::Scenario;
use crate::spaces::{matvec, Propagator, SpaceTag};

/// Default band width in grid steps.
pub const DEFAULT_BAND_STEPS: usize = 10;
/// Refuse fields larger than this many stored values.
pub const MAX_FIELD_VALUES: usize = 60_000_000;

/// Band-stored `D_s φ(t)` for `t − s` up to `band` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinField {
    paths: usize,
    steps: usize,
    dim: usize,
    band: usize,
    dt: f64,
    /// `[path][k][lag − 1][i]`.
    values: Vec<f64>,
}

impl MalliavinField {
    fn zeros(paths: usize, steps: usize, dim: usize, band: usize, dt: f64) -> Result<Self> {
        let len = paths * (steps + 1) * band * dim;
        if len > MAX_FIELD_VALUES {
            return Err(Error::Unsupported(format!(
                "Malliavin field would hold {len} values; shrink the band or the path count"
            )));
        }
        Ok(Self { paths, steps, dim, band, dt, values: vec![0.0; len] })
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

    /// Band width in grid steps.
    pub fn band(&self) -> usize {
        self.band
    }

    /// Band width in time units.
    pub fn band_width(&self) -> f64 {
        self.band as f64 * self.dt
    }

    fn offset(&self, path: usize, k: usize, lag: usize) -> usize {
        ((path * (self.steps + 1) + k) * self.band + lag - 1) * self.dim
    }

    /// `D_{t_l} φ(t_k)`: zero for `l ≥ k`, `None` outside the band.
    pub fn get(&self, path: usize, k: usize, l: usize) -> Option<&[f64]> {
        const ZERO: [f64; 0] = [];
        if l >= k {
            return Some(&ZERO);
        }
        let lag = k - l;
        if lag > self.band {
            return None;
        }
        let o = self.offset(path, k, lag);
        Some(&self.values[o..o + self.dim])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Coefficients of a linear scheme `φ_{k+1} = E(φ_k + Jφ_k dt + (Kφ_k + β_k)ΔW_k + …)`,
/// which is all the derivative recursion needs.
pub trait LinearDynamics: Sync {
    fn dim(&self) -> usize;
    /// `J` and `K` at `(path, k)`, row-major `dim×dim`.
    fn jacobians(&self, path: usize, k: usize, jx: &mut [f64], kx: &mut [f64]);
    /// Full diffusion coefficient at `(path, k)`.
    fn diffusion(&self, path: usize, k: usize, out: &mut [f64]);
    /// Applies the semigroup step `E` in place.
    fn propagate(&self, v: &mut [f64], scratch: &mut [f64]);
}

/// `D_{t_l} φ_{l+1} = E β_l`, then `D φ_{k+1} = E(I + J dt + K ΔW_k) D φ_k`.
pub fn malliavin_field(dynamics: &dyn LinearDynamics, bundle: &BrownianBundle, band: usize) -> Result<MalliavinField> {
    let grid = *bundle.grid();
    let (m, dt) = (grid.steps(), grid.dt());
    if band == 0 || band > m {
        return Err(Error::InvalidArgument(format!("band of {band} steps must lie in 1..={m}")));
    }
    let n = dynamics.dim();
    let mut field = MalliavinField::zeros(bundle.paths(), m, n, band, dt)?;
    let per_path = (m + 1) * band * n;
    field.values.par_chunks_mut(per_path).enumerate().for_each(|(path, out)| {
        let (mut jx, mut kx) = (vec![0.0; n * n], vec![0.0; n * n]);
        let (mut v, mut tmp, mut scratch) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        // Jacobians are shared across source times; cache them per step
        let jac: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
            .map(|k| {
                dynamics.jacobians(path, k, &mut jx, &mut kx);
                (jx.clone(), kx.clone())
            })
            .collect();
        for l in 0..m {
            dynamics.diffusion(path, l, &mut v);
            dynamics.propagate(&mut v, &mut scratch);
            for lag in 1..=band {
                let k = l + lag;
                if k > m {
                    break;
                }
                let o = (k * band + lag - 1) * n;
                out[o..o + n].copy_from_slice(&v);
                if k == m || lag == band {
                    break;
                }
                let dw = bundle.increment(path, k);
                let (j, kk) = (&jac[k].0, &jac[k].1);
                matvec(j, n, n, &v, &mut tmp);
                let mut next = v.clone();
                for i in 0..n {
                    next[i] += tmp[i] * dt;
                }
                matvec(kk, n, n, &v, &mut tmp);
                for i in 0..n {
                    next[i] += tmp[i] * dw;
                }
                v.copy_from_slice(&next);
                dynamics.propagate(&mut v, &mut scratch);
            }
        }
    });
    Ok(field)
}

/// Which scheme-generated process of a scenario to differentiate.
#[derive(Debug, Clone, Copy)]
pub enum MalliavinSource<'a> {
    State(&'a StateEnsemble),
    FirstVariation(&'a StateEnsemble, &'a VariationalEnsemble),
}

struct ScenarioDynamics<'a> {
    s: &'a Scenario,
    state: &'a StateEnsemble,
    variation: Option<&'a VariationalEnsemble>,
    prop: Propagator<f64>,
}

impl LinearDynamics for ScenarioDynamics<'_> {
    fn dim(&self) -> usize {
        self.s.state_dim()
    }

    fn jacobians(&self, path: usize, k: usize, jx: &mut [f64], kx: &mut [f64]) {
        let pack = &self.s.packs[self.state.gamma];
        let t = self.state.grid.node(k);
        let (x, u) = (self.state.x.at(path, k), self.state.control.at(path, k));
        pack.drift_dx(t, x, u, jx);
        pack.diffusion_dx(t, x, u, kx);
    }

    fn diffusion(&self, path: usize, k: usize, out: &mut [f64]) {
        let pack = &self.s.packs[self.state.gamma];
        let t = self.state.grid.node(k);
        let (x, u) = (self.state.x.at(path, k), self.state.control.at(path, k));
        match self.variation {
            None => pack.diffusion(t, x, u, out),
            Some(var) => {
                let (n, n1) = (self.s.state_dim(), self.s.control_dim());
                let mut lin = Linearization::new(n, n1);
                lin.fill(pack.as_ref(), t, x, u);
                let mut tmp = vec![0.0; n];
                matvec(&lin.kx, n, n, var.y.at(path, k), out);
                matvec(&lin.ku, n, n1, var.delta_u.at(path, k), &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
            }
        }
    }

    fn propagate(&self, v: &mut [f64], scratch: &mut [f64]) {
        self.prop.apply_in_place(v, scratch);
    }
}

/// Analytic field of `x` or `y` for state-affine regimes with path-independent
/// controls; the controls' own derivatives would otherwise enter and are not tracked.
pub fn malliavin_linear_sde(
    s: &Scenario,
    source: MalliavinSource<'_>,
    bundle: &BrownianBundle,
    band: usize,
) -> Result<MalliavinField> {
    let (state, variation) = match source {
        MalliavinSource::State(x) => (x, None),
        MalliavinSource::FirstVariation(x, v) => {
            v.y.check_shape(&x.x)?;
            (x, Some(v))
        }
    };
    let pack = s.pack(state.gamma)?;
    if !pack.structure().affine_in_state {
        return Err(Error::Unsupported(
            "regime is not affine in the state; use the finite-difference field instead".into(),
        ));
    }
    let fixed = |p: &AdaptedProcess| p.is_path_independent();
    if !fixed(&state.control) || variation.is_some_and(|v| !fixed(&v.delta_u)) {
        return Err(Error::Unsupported(
            "controls depend on the path; use the finite-difference field instead".into(),
        ));
    }
    if state.x.paths() != bundle.paths() || state.grid != *bundle.grid() {
        return Err(Error::Dimension("ensemble was not simulated on this bundle".into()));
    }
    let prop = s.semigroup.propagator(state.grid.dt())?;
    let dynamics = ScenarioDynamics { s, state, variation, prop };
    malliavin_field(&dynamics, bundle, band)
}

/// Central differences in each increment `ΔW_l`, re-running the state scheme with the
/// realized control held fixed over the band.
pub fn malliavin_state_fd(
    s: &Scenario,
    state: &StateEnsemble,
    bundle: &BrownianBundle,
    band: usize,
    bump: f64,
) -> Result<MalliavinField> {
    let grid = state.grid;
    let (m, dt) = (grid.steps(), grid.dt());
    if band == 0 || band > m {
        return Err(Error::InvalidArgument(format!("band of {band} steps must lie in 1..={m}")));
    }
    if !(bump > 0.0) {
        return Err(Error::InvalidArgument("finite-difference bump must be positive".into()));
    }
    let pack = s.pack(state.gamma)?.clone();
    let prop = s.semigroup.propagator(dt)?;
    let n = s.state_dim();
    let mut field = MalliavinField::zeros(bundle.paths(), m, n, band, dt)?;
    let per_path = (m + 1) * band * n;
    field.values.par_chunks_mut(per_path).enumerate().for_each(|(path, out)| {
        let (mut a, mut b, mut scratch) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut step = |x: &mut Vec<f64>, k: usize, extra: f64| {
            let u = state.control.at(path, k);
            pack.drift(grid.node(k), x, u, &mut a);
            pack.diffusion(grid.node(k), x, u, &mut b);
            let dw = bundle.increment(path, k) + extra;
            for i in 0..n {
                x[i] += a[i] * dt + b[i] * dw;
            }
            prop.apply_in_place(x, &mut scratch);
        };
        for l in 0..m {
            let mut up = state.x.at(path, l).to_vec();
            let mut dn = up.clone();
            step(&mut up, l, bump);
            step(&mut dn, l, -bump);
            for lag in 1..=band {
                let k = l + lag;
                if k > m {
                    break;
                }
                let o = (k * band + lag - 1) * n;
                for i in 0..n {
                    out[o + i] = (up[i] - dn[i]) / (2.0 * bump);
                }
                if k < m && lag < band {
                    step(&mut up, k, 0.0);
                    step(&mut dn, k, 0.0);
                }
            }
        }
    });
    Ok(field)
}

/// `∇φ(t_k) = D⁺φ(t_k) + D⁻φ(t_k)` read one step off the diagonal. `D⁻` vanishes for
/// adapted fields; the last node has no forward window and is left at zero.
pub fn nabla_approx(field: &MalliavinField) -> Result<AdaptedProcess> {
    if field.band < 2 {
        return Err(Error::InvalidArgument("band must cover at least two steps".into()));
    }
    let (m, n) = (field.steps, field.dim);
    Ok(AdaptedProcess::from_path_fn(field.paths, m, n, SpaceTag::H, |p, row| {
        for k in 0..m {
            let plus = field.get(p, k + 1, k).expect("lag 1 lies in the band");
            let minus = field.get(p, k.saturating_sub(1), k).expect("adapted");
            for i in 0..n {
                row[k * n + i] = plus[i] + minus.get(i).copied().unwrap_or(0.0);
            }
        }
    }))
}

/// Path functionals with known Malliavin derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WienerFunctional {
    Constant { value: f64 },
    /// `c·W(T)`.
    Linear { coef: f64 },
    /// `W(T)²`.
    Square,
    /// `x₀ exp((μ − ½σ²)T + σW(T))`.
    GeometricEndpoint { x0: f64, mu: f64, sigma: f64 },
}

impl WienerFunctional {
    fn value(&self, t: f64, w: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Linear { coef } => coef * w,
            Self::Square => w * w,
            Self::GeometricEndpoint { x0, mu, sigma } => x0 * ((mu - 0.5 * sigma * sigma) * t + sigma * w).exp(),
        }
    }

    fn mean(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Linear { .. } => 0.0,
            Self::Square => t,
            Self::GeometricEndpoint { x0, mu, .. } => x0 * (mu * t).exp(),
        }
    }

    /// `D_s ξ` (the same for every `s ≤ T`) as a function of `W(T)`.
    fn derivative(&self, t: f64, w: f64) -> f64 {
        match *self {
            Self::Constant { .. } => 0.0,
            Self::Linear { coef } => coef,
            Self::Square => 2.0 * w,
            Self::GeometricEndpoint { sigma, .. } => sigma * self.value(t, w),
        }
    }

    /// The derivative is constant across paths, so its conditional expectation is exact.
    fn derivative_is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. } | Self::Linear { .. })
    }
}

/// `E|ξ − Eξ − Σ_k E[D_{t_k}ξ | F_{t_k}] ΔW_k|²`, conditional expectations by
/// regression on powers of `W(t_k)` up to `degree`.
pub fn clark_ocone_check(xi: &WienerFunctional, bundle: &BrownianBundle, degree: usize) -> Result<Estimate> {
    let grid: TimeGrid = *bundle.grid();
    let (m, horizon) = (grid.steps(), grid.horizon());
    let paths = bundle.paths();
    let wt: Vec<f64> = (0..paths).map(|p| bundle.level(p, m)).collect();
    let deriv: Vec<f64> = wt.iter().map(|w| xi.derivative(horizon, *w)).collect();
    let mut integral = vec![0.0; paths];
    for k in 0..m {
        let fitted = if xi.derivative_is_constant() {
            deriv.clone()
        } else {
            let raw: Vec<f64> = (0..paths)
                .flat_map(|p| {
                    let w = bundle.level(p, k);
                    (1..=degree).map(move |d| w.powi(d as i32))
                })
                .collect();
            Regressor::from_raw(paths, degree, raw)?.project_one(&deriv)?
        };
        for p in 0..paths {
            integral[p] += fitted[p] * bundle.increment(p, k);
        }
    }
    let mean = xi.mean(horizon);
    let sq: Vec<f64> =
        (0..paths).map(|p| (xi.value(horizon, wt[p]) - mean - integral[p]).powi(2)).collect();
    Ok(Estimate::from_samples(&sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_state, simulate_variations, ControlProcess};
    use crate::scenario::builtin_example_one;

    /// `(W, ∫W dW)` as a two-dimensional linear system.
    struct WienerAndIntegral<'a>(&'a BrownianBundle);

    impl LinearDynamics for WienerAndIntegral<'_> {
        fn dim(&self) -> usize {
            2
        }
        fn jacobians(&self, _: usize, _: usize, jx: &mut [f64], kx: &mut [f64]) {
            jx.fill(0.0);
            kx.copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        }
        fn diffusion(&self, path: usize, k: usize, out: &mut [f64]) {
            out[0] = 1.0;
            out[1] = self.0.level(path, k);
        }
        fn propagate(&self, _: &mut [f64], _: &mut [f64]) {}
    }

    #[test]
    fn wiener_and_its_integral() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let b = BrownianBundle::generate(g, 3, 2).unwrap();
        let f = malliavin_field(&WienerAndIntegral(&b), &b, 10).unwrap();
        for p in 0..3 {
            for k in 0..=40usize {
                for l in k.saturating_sub(10)..k {
                    let d = f.get(p, k, l).unwrap();
                    assert_eq!(d[0], 1.0);
                    // W_l + W_k − W_{l+1}
                    let exact = b.level(p, l) + b.level(p, k) - b.level(p, l + 1);
                    assert!((d[1] - exact).abs() < 1e-12);
                }
                assert!(f.get(p, k, k).unwrap().is_empty());
                assert!(k < 11 || f.get(p, k, k - 11).is_none());
            }
            let nab = nabla_approx(&f).unwrap();
            for k in 0..40 {
                assert_eq!(nab.at(p, k)[0], 1.0);
                assert!((nab.at(p, k)[1] - b.level(p, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn example_one_variation_field_is_one() {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 20).unwrap();
        let b = BrownianBundle::generate(g, 50, 4).unwrap();
        let x = simulate_state(&s, 0, &ControlProcess::zero(1), &g, &b).unwrap();
        let v = simulate_variations(&s, &x, &ControlProcess::constant(vec![1.0]), &b).unwrap();
        let f = malliavin_linear_sde(&s, MalliavinSource::FirstVariation(&x, &v), &b, DEFAULT_BAND_STEPS).unwrap();
        assert!(f.values.iter().all(|v| *v == 1.0 || *v == 0.0));
        assert_eq!(f.get(3, 15, 10).unwrap(), &[1.0]);
        // the state itself is deterministic under the zero control
        let fx = malliavin_linear_sde(&s, MalliavinSource::State(&x), &b, DEFAULT_BAND_STEPS).unwrap();
        assert_eq!(fx.max_abs(), 0.0);
        assert!(nabla_approx(&fx).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn finite_differences_match_the_analytic_field() {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 20).unwrap();
        let b = BrownianBundle::generate(g, 20, 4).unwrap();
        let x = simulate_state(&s, 0, &ControlProcess::constant(vec![0.5]), &g, &b).unwrap();
        let a = malliavin_linear_sde(&s, MalliavinSource::State(&x), &b, 5).unwrap();
        let f = malliavin_state_fd(&s, &x, &b, 5, 1e-4).unwrap();
        let gap = a.values.iter().zip(&f.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "{gap}");
    }

    #[test]
    fn band_validation() {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = BrownianBundle::generate(g, 5, 4).unwrap();
        let x = simulate_state(&s, 0, &ControlProcess::zero(1), &g, &b).unwrap();
        assert!(malliavin_linear_sde(&s, MalliavinSource::State(&x), &b, 5).is_err());
        let f = malliavin_linear_sde(&s, MalliavinSource::State(&x), &b, 1).unwrap();
        assert!(nabla_approx(&f).is_err());
    }

    #[test]
    fn clark_ocone_library() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = BrownianBundle::generate(g, 4000, 8).unwrap();
        let lin = clark_ocone_check(&WienerFunctional::Linear { coef: 1.0 }, &b, 2).unwrap();
        assert!(lin.mean < 1e-25);
        let c = clark_ocone_check(&WienerFunctional::Constant { value: 3.0 }, &b, 2).unwrap();
        assert_eq!(c.mean, 0.0);
        // Σ(ΔW² − dt) has second moment 2T·dt
        let sq = clark_ocone_check(&WienerFunctional::Square, &b, 2).unwrap();
        assert!((sq.mean - 2.0 * g.dt()).abs() < 4.0 * sq.std_err + 0.005, "{sq:?}");
        let gbm = WienerFunctional::GeometricEndpoint { x0: 1.0, mu: 0.05, sigma: 0.2 };
        assert!(clark_ocone_check(&gbm, &b, 3).unwrap().mean < 1e-3);
    }
}
