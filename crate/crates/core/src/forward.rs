//! State, first and second variational processes by exponential Euler.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{AdaptedProcess, BrownianBundle, TimeGrid};
use crate::scenario::{nulling_control_coefficients, ExampleTwoParams, Scenario};
use crate::spaces::{matvec, SpaceTag};

/// Divergence guard on state norms.
pub const DIVERGENCE_BOUND: f64 = 1e8;

type TimeFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
type WienerFn = Arc<dyn Fn(f64, f64, &mut [f64]) + Send + Sync>;
type FeedbackFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum ControlKind {
    Constant(Vec<f64>),
    Deterministic(TimeFn),
    /// `u(t) = φ(t, W(t))`, optionally with `∂_w φ`.
    Wiener { value: WienerFn, gradient: Option<WienerFn> },
    Grid(Arc<AdaptedProcess>),
    Feedback(FeedbackFn),
}

impl fmt::Debug for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlKind::Constant(v) => write!(f, "Constant({v:?})"),
            ControlKind::Deterministic(_) => f.write_str("Deterministic(..)"),
            ControlKind::Wiener { .. } => f.write_str("Wiener(..)"),
            ControlKind::Grid(p) => write!(f, "Grid({} paths)", p.paths()),
            ControlKind::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

/// Adapted control `u(t, ω) ∈ H₁`.
#[derive(Debug, Clone)]
pub struct ControlProcess {
    pub kind: ControlKind,
    pub dim: usize,
    /// Project onto U at every evaluation.
    pub clamped: bool,
    pub label: String,
}

impl ControlProcess {
    pub fn constant(v: Vec<f64>) -> Self {
        let dim = v.len();
        let label = format!("constant{v:?}");
        Self { kind: ControlKind::Constant(v), dim, clamped: false, label }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    pub fn deterministic(dim: usize, f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { kind: ControlKind::Deterministic(Arc::new(f)), dim, clamped: false, label: "deterministic".into() }
    }

    pub fn wiener(
        dim: usize,
        value: impl Fn(f64, f64, &mut [f64]) + Send + Sync + 'static,
        gradient: Option<WienerFn>,
    ) -> Self {
        Self {
            kind: ControlKind::Wiener { value: Arc::new(value), gradient },
            dim,
            clamped: false,
            label: "wiener".into(),
        }
    }

    pub fn grid(values: AdaptedProcess) -> Self {
        let dim = values.dim();
        Self { kind: ControlKind::Grid(Arc::new(values)), dim, clamped: false, label: "grid".into() }
    }

    pub fn feedback(dim: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { kind: ControlKind::Feedback(Arc::new(f)), dim, clamped: false, label: "feedback".into() }
    }

    pub fn clamped(mut self) -> Self {
        self.clamped = true;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Same value on every path.
    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, ControlKind::Constant(_) | ControlKind::Deterministic(_))
    }

    #[allow(clippy::too_many_arguments)]
    fn eval(&self, path: usize, k: usize, t: f64, w: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ControlKind::Constant(v) => out.copy_from_slice(v),
            ControlKind::Deterministic(f) => f(t, out),
            ControlKind::Wiener { value, .. } => value(t, w, out),
            ControlKind::Grid(p) => out.copy_from_slice(p.at(path, k)),
            ControlKind::Feedback(f) => f(t, x, out),
        }
    }

    /// `∇u(t_k)` where known in closed form: zero for deterministic controls, `∂_w φ`
    /// for Wiener controls.
    pub fn nabla(&self, bundle: &BrownianBundle) -> Option<AdaptedProcess> {
        let grid = bundle.grid();
        match &self.kind {
            ControlKind::Constant(_) | ControlKind::Deterministic(_) => Some(AdaptedProcess::zeros(
                bundle.paths(),
                grid.steps(),
                self.dim,
                SpaceTag::H1,
            )),
            ControlKind::Wiener { gradient: Some(g), .. } => Some(AdaptedProcess::from_path_fn(
                bundle.paths(),
                grid.steps(),
                self.dim,
                SpaceTag::H1,
                |p, row| {
                    for k in 0..=grid.steps() {
                        g(grid.node(k), bundle.level(p, k), &mut row[k * self.dim..(k + 1) * self.dim]);
                    }
                },
            )),
            _ => None,
        }
    }

    /// Checks `u(t_k) ∈ U` on every path and grid time without storing the values.
    /// Feedback controls are skipped (`Ok(false)`): they need a state.
    pub fn check_admissible(&self, s: &Scenario, bundle: &BrownianBundle) -> Result<bool> {
        if matches!(self.kind, ControlKind::Feedback(_)) {
            return Ok(false);
        }
        if self.dim != s.control_dim() {
            return Err(Error::Dimension("control dimension differs from H1".into()));
        }
        if self.clamped {
            return Ok(true);
        }
        if let ControlKind::Grid(p) = &self.kind {
            if p.paths() != bundle.paths() || p.steps() != bundle.grid().steps() {
                return Err(Error::Dimension("grid control does not match the bundle".into()));
            }
        }
        let grid = bundle.grid();
        let w1 = s.spaces.weights(SpaceTag::H1);
        let paths = if self.is_deterministic() { 1 } else { bundle.paths() };
        let bad = (0..paths).into_par_iter().find_map_first(|p| {
            let mut v = vec![0.0; self.dim];
            (0..grid.steps()).find_map(|k| {
                self.eval(p, k, grid.node(k), bundle.level(p, k), &[], &mut v);
                (!s.control_set.contains(&v, w1, 1e-9)).then(|| (p, k, v.clone()))
            })
        });
        match bad {
            None => Ok(true),
            Some((p, k, v)) => Err(Error::InvalidArgument(format!(
                "control `{}` leaves U on path {p} at step {k}: {v:?}",
                self.label
            ))),
        }
    }

    /// Values on the grid without a state (open-loop kinds only).
    pub fn realize_open_loop(&self, s: &Scenario, bundle: &BrownianBundle) -> Result<AdaptedProcess> {
        if matches!(self.kind, ControlKind::Feedback(_)) {
            return Err(Error::Unsupported("feedback controls are realized along a state".into()));
        }
        if let ControlKind::Grid(p) = &self.kind {
            if p.paths() != bundle.paths() || p.steps() != bundle.grid().steps() {
                return Err(Error::Dimension("grid control does not match the bundle".into()));
            }
        }
        let grid = bundle.grid();
        let w1 = s.spaces.weights(SpaceTag::H1).to_vec();
        let d = self.dim;
        Ok(AdaptedProcess::from_path_fn(bundle.paths(), grid.steps(), d, SpaceTag::H1, |p, row| {
            for k in 0..=grid.steps() {
                let out = &mut row[k * d..(k + 1) * d];
                self.eval(p, k, grid.node(k), bundle.level(p, k), &[], out);
                if self.clamped {
                    s.control_set.project(out, &w1);
                }
            }
        }))
    }
}

/// Nulling control of the heat system: `u₁ = f`, `u₂ = 0`, with `∇f = b₁₁ f`.
pub fn nulling_control(params: &ExampleTwoParams) -> ControlProcess {
    let (scale, rate, vol) = nulling_control_coefficients(params);
    let n = params.modes;
    let (s2, r2) = (scale.clone(), rate.clone());
    let value = move |t: f64, w: f64, out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n {
            out[i] = scale[i] * (rate[i] * t + vol * w).exp();
        }
    };
    let gradient: WienerFn = Arc::new(move |t: f64, w: f64, out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n {
            out[i] = vol * s2[i] * (r2[i] * t + vol * w).exp();
        }
    });
    ControlProcess::wiener(2 * n, value, Some(gradient)).with_label("nulling")
}

/// Simulated state of one uncertainty point with the realized control values.
#[derive(Debug, Clone)]
pub struct StateEnsemble {
    pub gamma: usize,
    pub x: AdaptedProcess,
    pub control: AdaptedProcess,
    pub control_deterministic: bool,
    pub grid: TimeGrid,
}

/// First and second variations for one control increment.
#[derive(Debug, Clone)]
pub struct VariationalEnsemble {
    pub gamma: usize,
    pub y: AdaptedProcess,
    pub z: Option<AdaptedProcess>,
    pub delta_u: AdaptedProcess,
}

fn guard(v: &[f64], step: usize, time: f64) -> Result<()> {
    let n2: f64 = v.iter().map(|x| x * x).sum();
    if !n2.is_finite() || n2.sqrt() > DIVERGENCE_BOUND {
        return Err(Error::Divergence { step, time, detail: format!("state norm {:.3e}", n2.sqrt()) });
    }
    Ok(())
}

fn check_bundle(s: &Scenario, gamma: usize, grid: &TimeGrid, bundle: &BrownianBundle) -> Result<()> {
    s.pack(gamma)?;
    if bundle.grid() != grid {
        return Err(Error::Dimension("bundle grid differs from the requested grid".into()));
    }
    if (grid.horizon() - s.horizon).abs() > 1e-12 * s.horizon {
        return Err(Error::InvalidArgument("grid horizon differs from the scenario horizon".into()));
    }
    Ok(())
}

/// `x_{k+1} = e^{A dt}(x_k + a dt + b ΔW_k)` with left-endpoint coefficients.
pub fn simulate_state(
    s: &Scenario,
    gamma: usize,
    u: &ControlProcess,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
) -> Result<StateEnsemble> {
    check_bundle(s, gamma, grid, bundle)?;
    if u.dim != s.control_dim() {
        return Err(Error::Dimension("control dimension differs from H1".into()));
    }
    if let ControlKind::Grid(p) = &u.kind {
        if p.paths() != bundle.paths() || p.steps() != grid.steps() {
            return Err(Error::Dimension("grid control does not match the bundle".into()));
        }
    }
    let pack = s.pack(gamma)?.clone();
    let n = s.state_dim();
    let n1 = s.control_dim();
    let m = grid.steps();
    let dt = grid.dt();
    let prop = s.semigroup.propagator(dt)?;
    let w1 = s.spaces.weights(SpaceTag::H1).to_vec();
    let paths = bundle.paths();

    let mut controls = AdaptedProcess::zeros(paths, m, n1, SpaceTag::H1);
    let stride_u = (m + 1) * n1;
    let stride_x = (m + 1) * n;
    let mut x = AdaptedProcess::zeros(paths, m, n, SpaceTag::H);
    let errors: Vec<Error> = x
        .values_mut()
        .par_chunks_mut(stride_x)
        .zip(controls.values_mut().par_chunks_mut(stride_u))
        .enumerate()
        .filter_map(|(p, (xs, us))| {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            let mut scratch = vec![0.0; n];
            xs[..n].copy_from_slice(&s.initial_state);
            let inc = bundle.path_increments(p);
            for k in 0..=m {
                let t = grid.node(k);
                let (done, rest) = xs.split_at_mut((k + 1) * n);
                let xk = &done[k * n..];
                let uk = &mut us[k * n1..(k + 1) * n1];
                u.eval(p, k, t, bundle.level(p, k), xk, uk);
                if u.clamped {
                    s.control_set.project(uk, &w1);
                }
                if k == m {
                    break;
                }
                pack.drift(t, xk, uk, &mut a);
                pack.diffusion(t, xk, uk, &mut b);
                let next = &mut rest[..n];
                for i in 0..n {
                    next[i] = xk[i] + a[i] * dt + b[i] * inc[k];
                }
                prop.apply_in_place(next, &mut scratch);
                if let Err(e) = guard(next, k + 1, grid.node(k + 1)) {
                    return Some(e);
                }
            }
            None
        })
        .collect();
    if let Some(e) = crate::paths::first_by_step(errors) {
        return Err(e);
    }
    Ok(StateEnsemble { gamma, x, control: controls, control_deterministic: u.is_deterministic(), grid: *grid })
}

/// Frozen first derivatives along the reference trajectory at one node.
pub(crate) struct Linearization {
    pub jx: Vec<f64>,
    pub ju: Vec<f64>,
    pub kx: Vec<f64>,
    pub ku: Vec<f64>,
}

impl Linearization {
    pub fn new(n: usize, n1: usize) -> Self {
        Self { jx: vec![0.0; n * n], ju: vec![0.0; n * n1], kx: vec![0.0; n * n], ku: vec![0.0; n * n1] }
    }

    pub fn fill(&mut self, pack: &dyn crate::scenario::CoefficientPack, t: f64, x: &[f64], u: &[f64]) {
        pack.drift_dx(t, x, u, &mut self.jx);
        pack.drift_du(t, x, u, &mut self.ju);
        pack.diffusion_dx(t, x, u, &mut self.kx);
        pack.diffusion_du(t, x, u, &mut self.ku);
    }
}

fn check_variation_inputs(xbar: &StateEnsemble, du: &AdaptedProcess, bundle: &BrownianBundle) -> Result<()> {
    if du.paths() != bundle.paths() || du.steps() != xbar.grid.steps() || xbar.x.paths() != bundle.paths() {
        return Err(Error::Dimension("variation inputs do not share the bundle".into()));
    }
    if du.dim() != xbar.control.dim() {
        return Err(Error::Dimension("control increment dimension differs from H1".into()));
    }
    Ok(())
}

/// First variation `y` driven by `δu` around the reference state `xbar`.
pub fn simulate_first_variation(
    s: &Scenario,
    xbar: &StateEnsemble,
    delta_u: &AdaptedProcess,
    bundle: &BrownianBundle,
) -> Result<VariationalEnsemble> {
    let stepper = FirstVariationStepper::new(s, xbar, delta_u, bundle)?;
    let (m, n) = (xbar.grid.steps(), s.state_dim());
    let y = AdaptedProcess::try_from_path_fn(bundle.paths(), m, n, SpaceTag::H, |p, row| {
        stepper.run(p, |k, yk| row[k * n..(k + 1) * n].copy_from_slice(yk))
    })?;
    Ok(VariationalEnsemble { gamma: xbar.gamma, y, z: None, delta_u: delta_u.clone() })
}

/// Steps the first variation one path at a time without storing it.
pub struct FirstVariationStepper<'a> {
    s: &'a Scenario,
    xbar: &'a StateEnsemble,
    delta_u: &'a AdaptedProcess,
    bundle: &'a BrownianBundle,
    pack: std::sync::Arc<dyn crate::scenario::CoefficientPack>,
    prop: crate::spaces::Propagator<f64>,
}

impl<'a> FirstVariationStepper<'a> {
    pub fn new(
        s: &'a Scenario,
        xbar: &'a StateEnsemble,
        delta_u: &'a AdaptedProcess,
        bundle: &'a BrownianBundle,
    ) -> Result<Self> {
        check_variation_inputs(xbar, delta_u, bundle)?;
        let pack = s.pack(xbar.gamma)?.clone();
        let prop = s.semigroup.propagator(xbar.grid.dt())?;
        Ok(Self { s, xbar, delta_u, bundle, pack, prop })
    }

    /// Calls `visit(k, y_k)` for `k = 0..=M` along one path.
    pub fn run(&self, p: usize, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        let n = self.s.state_dim();
        let grid = self.xbar.grid;
        let (m, dt) = (grid.steps(), grid.dt());
        let pack = self.pack.as_ref();
        let mut drift = vec![0.0; n];
        let mut noise = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut yk = vec![0.0; n];
        let mut next = vec![0.0; n];
        visit(0, &yk);
        for k in 0..m {
            let t = grid.node(k);
            let (x, u) = (self.xbar.x.at(p, k), self.xbar.control.at(p, k));
            let du = self.delta_u.at(p, k);
            pack.drift_dx_apply(t, x, u, &yk, &mut drift);
            pack.drift_du_apply(t, x, u, du, &mut tmp);
            drift.iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
            pack.diffusion_dx_apply(t, x, u, &yk, &mut noise);
            pack.diffusion_du_apply(t, x, u, du, &mut tmp);
            noise.iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
            let dw = self.bundle.increment(p, k);
            for i in 0..n {
                next[i] = yk[i] + drift[i] * dt + noise[i] * dw;
            }
            self.prop.apply_in_place(&mut next, &mut scratch);
            guard(&next, k + 1, grid.node(k + 1))?;
            std::mem::swap(&mut yk, &mut next);
            visit(k + 1, &yk);
        }
        Ok(())
    }
}

/// Second-order forcing `∂xx f(y,y) + 2∂xu f(y,δu) + ∂uu f(δu,δu)` for `f = a` or `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn second_order_forcing(
    pack: &dyn crate::scenario::CoefficientPack,
    diffusion: bool,
    t: f64,
    x: &[f64],
    u: &[f64],
    y: &[f64],
    du: &[f64],
    out: &mut [f64],
    tmp: &mut [f64],
) {
    if diffusion {
        pack.diffusion_dxx(t, x, u, y, y, out);
        pack.diffusion_dxu(t, x, u, y, du, tmp);
    } else {
        pack.drift_dxx(t, x, u, y, y, out);
        pack.drift_dxu(t, x, u, y, du, tmp);
    }
    out.iter_mut().zip(tmp.iter()).for_each(|(o, v)| *o += 2.0 * v);
    if diffusion {
        pack.diffusion_duu(t, x, u, du, du, tmp);
    } else {
        pack.drift_duu(t, x, u, du, du, tmp);
    }
    out.iter_mut().zip(tmp.iter()).for_each(|(o, v)| *o += v);
}

/// Second variation `z`; `var` must hold `y` for the same increment and bundle.
pub fn simulate_second_variation(
    s: &Scenario,
    xbar: &StateEnsemble,
    var: &VariationalEnsemble,
    bundle: &BrownianBundle,
) -> Result<VariationalEnsemble> {
    check_variation_inputs(xbar, &var.delta_u, bundle)?;
    var.y.check_shape(&xbar.x)?;
    let pack = s.pack(xbar.gamma)?.clone();
    let n = s.state_dim();
    let n1 = s.control_dim();
    let grid = xbar.grid;
    let m = grid.steps();
    let dt = grid.dt();
    let prop = s.semigroup.propagator(dt)?;
    let z = AdaptedProcess::try_from_path_fn(bundle.paths(), m, n, SpaceTag::H, |p, row| {
        let mut lin = Linearization::new(n, n1);
        let mut drift = vec![0.0; n];
        let mut noise = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut tmp2 = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for k in 0..m {
            let t = grid.node(k);
            let (xk, uk) = (xbar.x.at(p, k), xbar.control.at(p, k));
            lin.fill(pack.as_ref(), t, xk, uk);
            let (yk, du) = (var.y.at(p, k), var.delta_u.at(p, k));
            let (done, rest) = row.split_at_mut((k + 1) * n);
            let zk = &done[k * n..];
            matvec(&lin.jx, n, n, zk, &mut drift);
            second_order_forcing(pack.as_ref(), false, t, xk, uk, yk, du, &mut tmp, &mut tmp2);
            drift.iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
            matvec(&lin.kx, n, n, zk, &mut noise);
            second_order_forcing(pack.as_ref(), true, t, xk, uk, yk, du, &mut tmp, &mut tmp2);
            noise.iter_mut().zip(&tmp).for_each(|(d, v)| *d += v);
            let dw = bundle.increment(p, k);
            let next = &mut rest[..n];
            for i in 0..n {
                next[i] = zk[i] + drift[i] * dt + noise[i] * dw;
            }
            prop.apply_in_place(next, &mut scratch);
            guard(next, k + 1, grid.node(k + 1))?;
        }
        Ok(())
    })?;
    Ok(VariationalEnsemble { z: Some(z), ..var.clone() })
}

/// Both variations for the increment `u − ū` realized along the reference controls.
pub fn simulate_variations(
    s: &Scenario,
    xbar: &StateEnsemble,
    u: &ControlProcess,
    bundle: &BrownianBundle,
) -> Result<VariationalEnsemble> {
    let delta_u = control_increment(s, xbar, u, bundle)?;
    let v = simulate_first_variation(s, xbar, &delta_u, bundle)?;
    simulate_second_variation(s, xbar, &v, bundle)
}

/// `δu = u − ū` on the grid; feedback `u` is realized along its own closed loop.
pub fn control_increment(
    s: &Scenario,
    xbar: &StateEnsemble,
    u: &ControlProcess,
    bundle: &BrownianBundle,
) -> Result<AdaptedProcess> {
    let mut realized = match u.kind {
        ControlKind::Feedback(_) => simulate_state(s, xbar.gamma, u, &xbar.grid, bundle)?.control,
        _ => u.realize_open_loop(s, bundle)?,
    };
    realized.add_scaled(&xbar.control, -1.0)?;
    Ok(realized)
}

/// Remainder magnitudes and log-log slopes over a list of step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    /// Slope between consecutive epsilons; empty when `exact`.
    pub slopes: Vec<f64>,
    /// Every value is at round-off level, so no rate is defined.
    pub exact: bool,
}

impl RateReport {
    pub fn from_values(epsilons: Vec<f64>, values: Vec<f64>, floor: f64) -> Self {
        let exact = values.iter().all(|v| v.abs() <= floor);
        let slopes = if exact {
            Vec::new()
        } else {
            epsilons
                .windows(2)
                .zip(values.windows(2))
                .map(|(e, v)| (v[0].abs() / v[1].abs()).ln() / (e[0] / e[1]).ln())
                .collect()
        };
        Self { epsilons, values, slopes, exact }
    }

    pub fn mean_slope(&self) -> Option<f64> {
        if self.slopes.is_empty() {
            None
        } else {
            Some(self.slopes.iter().sum::<f64>() / self.slopes.len() as f64)
        }
    }

    pub fn min_slope(&self) -> Option<f64> {
        self.slopes.iter().copied().reduce(f64::min)
    }

    pub fn max_slope(&self) -> Option<f64> {
        self.slopes.iter().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `max_k (E‖δx^ε − εy‖²)^{1/2}`.
    pub first: RateReport,
    /// `max_k (E‖δx^ε − εy − ε²z/2‖²)^{1/2}`.
    pub second: RateReport,
}

/// Remainders of the first and second order expansions of the state along
/// `ū + ε(u − ū)`, all on common random numbers.
pub fn convergence_probe(
    s: &Scenario,
    gamma: usize,
    ubar: &ControlProcess,
    u: &ControlProcess,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
    epsilons: &[f64],
) -> Result<ConvergenceReport> {
    if epsilons.len() < 2 {
        return Err(Error::InvalidArgument("at least two epsilons are required".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("epsilons must be positive and decreasing".into()));
    }
    let xbar = simulate_state(s, gamma, ubar, grid, bundle)?;
    let var = simulate_variations(s, &xbar, u, bundle)?;
    let z = var.z.as_ref().expect("second variation filled");
    let wh = s.spaces.weights(SpaceTag::H).to_vec();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for &eps in epsilons {
        let ueps = xbar.control.combine(1.0, &var.delta_u, eps)?;
        let xe = simulate_state(s, gamma, &ControlProcess::grid(ueps), grid, bundle)?;
        let r1 = xe.x.combine(1.0, &xbar.x, -1.0)?.combine(1.0, &var.y, -eps)?;
        let r2 = r1.combine(1.0, z, -0.5 * eps * eps)?;
        first.push(r1.rms_profile(None, &wh).into_iter().fold(0.0, f64::max));
        second.push(r2.rms_profile(None, &wh).into_iter().fold(0.0, f64::max));
    }
    let scale = xbar.x.rms_profile(None, &wh).into_iter().fold(1.0, f64::max);
    let floor = 1e-12 * scale;
    Ok(ConvergenceReport {
        first: RateReport::from_values(epsilons.to_vec(), first, floor),
        second: RateReport::from_values(epsilons.to_vec(), second, floor),
    })
}

/// `sup_k (E‖v(t_k)‖^p)^{1/p}` under weights `w`.
pub fn sup_moment(v: &AdaptedProcess, w: &[f64], p: f64) -> f64 {
    (0..=v.steps())
        .map(|k| {
            let s: f64 = (0..v.paths())
                .map(|path| {
                    let x = v.at(path, k);
                    let n2: f64 = x.iter().zip(w).map(|(a, b)| a * a * b * b).sum();
                    n2.powf(0.5 * p)
                })
                .sum();
            (s / v.paths() as f64).powf(1.0 / p)
        })
        .fold(0.0, f64::max)
}

/// Per-time ensemble statistics as CSV rows `t,stat,value,gamma,label`.
pub fn write_stats_csv<W: Write>(
    out: &mut csv::Writer<W>,
    process: &AdaptedProcess,
    grid: &TimeGrid,
    gamma: &str,
    label: &str,
    weights: &[f64],
) -> Result<()> {
    let wrap = |e: csv::Error| Error::Io(e.to_string());
    for k in 0..=process.steps() {
        let t = grid.node(k);
        let t_s = format!("{t}");
        for i in 0..process.dim() {
            out.write_record([t_s.as_str(), &format!("mean[{i}]"), &format!("{}", process.mean(k, i)), gamma, label])
                .map_err(wrap)?;
        }
        let mut norms: Vec<f64> = (0..process.paths())
            .map(|p| process.at(p, k).iter().zip(weights).map(|(a, w)| a * a * w * w).sum::<f64>())
            .collect();
        let second = norms.iter().sum::<f64>() / norms.len() as f64;
        out.write_record([t_s.as_str(), "second_moment", &format!("{second}"), gamma, label]).map_err(wrap)?;
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        norms.sort_by(|a, b| a.total_cmp(b));
        for (name, q) in [("norm_q05", 0.05), ("norm_q50", 0.5), ("norm_q95", 0.95)] {
            let idx = ((norms.len() - 1) as f64 * q).round() as usize;
            out.write_record([t_s.as_str(), name, &format!("{}", norms[idx]), gamma, label]).map_err(wrap)?;
        }
    }
    out.flush()?;
    Ok(())
}
