//! Second order necessary conditions at a classically singular control.
//!
//! `S*(t)` is stored as the `N×N₁` coordinate matrix mapping control directions into H:
//! `S* = (∂xu H)^♯ + P ∂u a + Q* ∂u b + (∂x b)* P ∂u b`, where `♯` turns the coordinate
//! mixed Hessian into an H-valued map.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::SCHEME_CONSTANT;
use crate::error::{Error, Result};
use crate::forward::{control_increment, ControlProcess, FirstVariationStepper, RateReport, StateEnsemble};
use crate::paths::{AdaptedProcess, BrownianBundle, Estimate};
use crate::robust::GammaReference;
use crate::scenario::Scenario;
use crate::spaces::{matmul, matvec, weighted_dot, SemigroupSpec, SpaceTag};

/// Paths compared when deciding that a coefficient does not depend on the path.
const DETERMINISM_SAMPLE: usize = 16;
/// Paths averaged by the pointwise condition.
pub const POINTWISE_PATH_CAP: usize = 4096;
/// Default number of control points for the pointwise condition.
pub const DEFAULT_PROBE_POINTS: usize = 32;

/// `S*(t)` per step, optionally per path.
#[derive(Debug, Clone, PartialEq)]
pub struct SOperatorProcess {
    pub gamma: usize,
    n: usize,
    n1: usize,
    steps: usize,
    /// `None` when one matrix per step serves every path.
    paths: Option<usize>,
    values: Vec<f64>,
}

impl SOperatorProcess {
    pub fn is_deterministic(&self) -> bool {
        self.paths.is_none()
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.n1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `N×N₁` row-major matrix of `S*` at `(path, k)`.
    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        let len = self.n * self.n1;
        let idx = match self.paths {
            None => k,
            Some(_) => path * (self.steps + 1) + k,
        };
        &self.values[idx * len..(idx + 1) * len]
    }

    /// All-zero process with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Smallest and largest coordinate entry over all paths and steps.
    pub fn value_range(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Coordinate matrices entering `S*` at one point.
struct SPieces {
    n: usize,
    n1: usize,
    ju: Vec<f64>,
    ku: Vec<f64>,
    kx: Vec<f64>,
    mixed: Vec<f64>,
    ev: Vec<f64>,
    ew: Vec<f64>,
    tmp: Vec<f64>,
    buf: Vec<f64>,
}

impl SPieces {
    fn new(n: usize, n1: usize) -> Self {
        Self {
            n,
            n1,
            ju: vec![0.0; n * n1],
            ku: vec![0.0; n * n1],
            kx: vec![0.0; n * n],
            mixed: vec![0.0; n * n1],
            ev: vec![0.0; n],
            ew: vec![0.0; n1],
            tmp: vec![0.0; n],
            buf: vec![0.0; n * n1],
        }
    }

    fn jacobians(&mut self, st: &StateEnsemble, s: &Scenario, path: usize, k: usize) {
        let pack = &s.packs[st.gamma];
        let t = st.grid.node(k);
        let (x, u) = (st.x.at(path, k), st.control.at(path, k));
        pack.drift_du(t, x, u, &mut self.ju);
        pack.diffusion_du(t, x, u, &mut self.ku);
        pack.diffusion_dx(t, x, u, &mut self.kx);
    }

    /// Writes `S*` at `(path, k)` into `out`.
    fn assemble(&mut self, r: &GammaReference, s: &Scenario, path: usize, k: usize, with_mixed: bool, w: &[f64], w2: &[f64], out: &mut [f64]) {
        let (n, n1) = (self.n, self.n1);
        self.jacobians(&r.state, s, path, k);
        let pk = r.second.p.at(path, k);
        // P ∂u a
        matmul(pk, &self.ju, n, n, n1, out);
        // (∂x b)* P ∂u b
        matmul(pk, &self.ku, n, n, n1, &mut self.buf);
        let kx_star = crate::adjoint::h_adjoint(&self.kx, n, w2);
        let mut extra = vec![0.0; n * n1];
        matmul(&kx_star, &self.buf, n, n, n1, &mut extra);
        out.iter_mut().zip(&extra).for_each(|(o, e)| *o += e);
        // Q* ∂u b
        if let Some(q) = &r.second.q {
            let q_star = crate::adjoint::h_adjoint(q.at(path, k), n, w2);
            matmul(&q_star, &self.ku, n, n, n1, &mut extra);
            out.iter_mut().zip(&extra).for_each(|(o, e)| *o += e);
        }
        if with_mixed {
            self.mixed_hessian(r, s, path, k, w);
            for i in 0..n {
                for j in 0..n1 {
                    out[i * n1 + j] += self.mixed[i * n1 + j] / w2[i];
                }
            }
        }
    }

    /// Coordinate `∂xu H(e_i, e_j) = ⟨p, a_xu⟩_H + ⟨q, b_xu⟩_H − g_xu`.
    fn mixed_hessian(&mut self, r: &GammaReference, s: &Scenario, path: usize, k: usize, w: &[f64]) {
        let (n, n1) = (self.n, self.n1);
        let pack = &s.packs[r.state.gamma];
        let t = r.state.grid.node(k);
        let (x, u) = (r.state.x.at(path, k), r.state.control.at(path, k));
        let (p, q) = (r.first.p.at(path, k), r.first.q.at(path, k));
        pack.running_cost_dxu(t, x, u, &mut self.mixed);
        self.mixed.iter_mut().for_each(|v| *v = -*v);
        for i in 0..n {
            self.ev.fill(0.0);
            self.ev[i] = 1.0;
            for j in 0..n1 {
                self.ew.fill(0.0);
                self.ew[j] = 1.0;
                pack.drift_dxu(t, x, u, &self.ev, &self.ew, &mut self.tmp);
                let mut v = weighted_dot(w, p, &self.tmp);
                pack.diffusion_dxu(t, x, u, &self.ev, &self.ew, &mut self.tmp);
                v += weighted_dot(w, q, &self.tmp);
                self.mixed[i * n1 + j] += v;
            }
        }
    }
}

/// `out (+)= Lᵀ W² R` for `N×N₁` coordinate matrices `L`, `R`.
fn h_gram(left: &[f64], right: &[f64], w: &[f64], n: usize, n1: usize, out: &mut [f64], accumulate: bool) {
    if !accumulate {
        out.fill(0.0);
    }
    for a in 0..n {
        let wa = w[a] * w[a];
        for i in 0..n1 {
            let l = left[a * n1 + i] * wa;
            if l == 0.0 {
                continue;
            }
            for j in 0..n1 {
                out[i * n1 + j] += l * right[a * n1 + j];
            }
        }
    }
}

/// Exact equality of a coefficient across a spread of sample paths at every step.
fn sampled_path_independent(paths: usize, steps: usize, f: impl Fn(usize, usize) -> Vec<f64> + Sync) -> bool {
    let sample: Vec<usize> = (0..DETERMINISM_SAMPLE.min(paths)).map(|i| i * paths / DETERMINISM_SAMPLE.min(paths)).collect();
    (0..=steps).into_par_iter().all(|k| {
        let first = f(sample[0], k);
        sample[1..].iter().all(|&p| f(p, k) == first)
    })
}

/// Assembles `S*` along the reference. The path axis is collapsed when the regime is
/// affine with no mixed terms, `P` is deterministic, and the control Jacobians agree on
/// a sample of paths.
pub fn assemble_s(s: &Scenario, r: &GammaReference, max_values: usize) -> Result<SOperatorProcess> {
    let (n, n1) = (s.state_dim(), s.control_dim());
    let pack = s.pack(r.state.gamma)?;
    r.first.p.check_shape(&r.state.x)?;
    let steps = r.state.grid.steps();
    if r.second.p.dim() != n || r.second.p.steps() != steps {
        return Err(Error::Dimension("second adjoint does not match the reference".into()));
    }
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let w2 = s.spaces.metric(SpaceTag::H);
    let st = pack.structure();
    let paths = r.state.x.paths();
    let no_mixed = st.affine_in_state && st.state_jacobian_control_free && st.quadratic_state_costs;
    let deterministic = no_mixed
        && r.second.deterministic
        && r.second.q.is_none()
        && sampled_path_independent(paths, steps, |p, k| {
            let mut pieces = SPieces::new(n, n1);
            pieces.jacobians(&r.state, s, p, k);
            [pieces.ju, pieces.ku, pieces.kx].concat()
        });
    let len = n * n1;
    if deterministic {
        let mut values = vec![0.0; (steps + 1) * len];
        values.par_chunks_mut(len).enumerate().for_each(|(k, out)| {
            SPieces::new(n, n1).assemble(r, s, 0, k, false, &w, &w2, out);
        });
        return Ok(SOperatorProcess { gamma: r.state.gamma, n, n1, steps, paths: None, values });
    }
    let total = paths * (steps + 1) * len;
    if total > max_values {
        return Err(Error::Unsupported(format!("path-dependent S would hold {total} values")));
    }
    let mut values = vec![0.0; total];
    values.par_chunks_mut((steps + 1) * len).enumerate().for_each(|(p, row)| {
        let mut pieces = SPieces::new(n, n1);
        for k in 0..=steps {
            pieces.assemble(r, s, p, k, !no_mixed, &w, &w2, &mut row[k * len..(k + 1) * len]);
        }
    });
    Ok(SOperatorProcess { gamma: r.state.gamma, n, n1, steps, paths: Some(paths), values })
}

/// `∇S*`: identically zero when `S*` does not depend on the path. Otherwise the
/// caller must supply it.
pub fn nabla_s(sop: &SOperatorProcess) -> Option<SOperatorProcess> {
    sop.is_deterministic().then(|| sop.zeros_like())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Integral,
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionVerdict {
    Consistent,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub label: String,
    /// Grid index of `τ` for pointwise witnesses.
    pub step: Option<usize>,
    pub point: Option<Vec<f64>>,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub label: String,
    pub step: Option<usize>,
    pub point: Option<Vec<f64>>,
    pub value: f64,
    pub std_err: f64,
    pub tolerance: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub kind: ConditionKind,
    /// Smallest `Φ` (integral) or largest `G` (pointwise).
    pub extreme: f64,
    pub entries: Vec<ConditionEntry>,
    pub lambda_used: Vec<Vec<f64>>,
    pub verdict: ConditionVerdict,
    pub witness: Option<Witness>,
    pub notes: Vec<String>,
}

impl ConditionReport {
    /// CSV of the entries: label, step, value, std_err, tolerance, then the point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["label", "step", "value", "std_err", "tolerance", "point"]).map_err(csv_err)?;
        for e in &self.entries {
            let point = e.point.as_ref().map(|p| p.iter().map(|v| format!("{v:.6e}")).collect::<Vec<_>>().join(" "));
            w.write_record([
                e.label.clone(),
                e.step.map(|s| s.to_string()).unwrap_or_default(),
                format!("{:.12e}", e.value),
                format!("{:.6e}", e.std_err),
                format!("{:.6e}", e.tolerance),
                point.unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn check_lambda(s: &Scenario, l: &[f64]) -> Result<()> {
    if l.len() != s.gamma_count() || !s.uncertainty.lambda_set.contains(l, 1e-9) {
        return Err(Error::InvalidArgument(format!("measure {l:?} lies outside Λ")));
    }
    Ok(())
}

fn check_refs(s: &Scenario, refs: &[GammaReference], sops: &[SOperatorProcess]) -> Result<()> {
    let m = s.gamma_count();
    if refs.len() != m || sops.len() != m {
        return Err(Error::InvalidArgument("one reference and one S per regime are required".into()));
    }
    for (g, (r, so)) in refs.iter().zip(sops).enumerate() {
        if r.state.gamma != g || so.gamma != g || so.steps != r.state.grid.steps() {
            return Err(Error::Dimension(format!("regime {g}: reference and S do not line up")));
        }
    }
    Ok(())
}

/// Per-path `Σ_k dt ⟨y_k, S*_k δu_k⟩_H` for one regime; `y` is never stored.
pub fn pairing_samples(
    s: &Scenario,
    state: &StateEnsemble,
    sop: &SOperatorProcess,
    delta_u: &AdaptedProcess,
    bundle: &BrownianBundle,
) -> Result<Vec<f64>> {
    let stepper = FirstVariationStepper::new(s, state, delta_u, bundle)?;
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let (n, n1) = (sop.n, sop.n1);
    let grid = state.grid;
    let (steps, dt) = (grid.steps(), grid.dt());
    (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let mut sd = vec![0.0; n];
            let mut acc = 0.0;
            stepper.run(p, |k, yk| {
                if k < steps {
                    matvec(sop.at(p, k), n, n1, delta_u.at(p, k), &mut sd);
                    acc += dt * weighted_dot(&w, yk, &sd);
                }
            })?;
            Ok(acc)
        })
        .collect()
}

/// How `λ` enters the integral condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    /// One common measure for every direction.
    Common(Vec<f64>),
    /// Best measure per direction among these (vertices of the argmax face).
    PerDirection(Vec<Vec<f64>>),
}

/// Per-path pairings of one direction, one vector per regime.
#[derive(Debug, Clone)]
pub struct DirectionPairings {
    pub label: String,
    pub per_gamma: Vec<Vec<f64>>,
}

/// Pairings of every direction against one regime, in direction order.
pub fn regime_pairings(
    s: &Scenario,
    state: &StateEnsemble,
    sop: &SOperatorProcess,
    directions: &[ControlProcess],
    bundle: &BrownianBundle,
) -> Result<Vec<Vec<f64>>> {
    if sop.gamma != state.gamma || sop.steps != state.grid.steps() {
        return Err(Error::Dimension(format!("regime {}: reference and S do not line up", state.gamma)));
    }
    directions
        .iter()
        .map(|u| {
            let du = control_increment(s, state, u, bundle)?;
            pairing_samples(s, state, sop, &du, bundle)
        })
        .collect()
}

/// `Φ(u; λ) = −Σ_γ λ_γ E∫⟨y_γ, S_γ*(u − ū)⟩_H dt` for each direction; the condition
/// requires `Φ ≥ 0`, so the verdict is violated when some `Φ < −tolerance`.
pub fn integral_condition(
    s: &Scenario,
    refs: &[GammaReference],
    sops: &[SOperatorProcess],
    directions: &[ControlProcess],
    lambda: &LambdaChoice,
    bundle: &BrownianBundle,
) -> Result<ConditionReport> {
    check_refs(s, refs, sops)?;
    let per_regime = refs
        .iter()
        .zip(sops)
        .map(|(r, so)| regime_pairings(s, &r.state, so, directions, bundle))
        .collect::<Result<Vec<_>>>()?;
    let pairings = collect_pairings(directions, per_regime);
    integral_from_pairings(s, &pairings, lambda, refs[0].state.grid.dt())
}

/// Regroups `[regime][direction]` pairings by direction.
pub fn collect_pairings(directions: &[ControlProcess], per_regime: Vec<Vec<Vec<f64>>>) -> Vec<DirectionPairings> {
    let mut by_dir: Vec<DirectionPairings> = directions
        .iter()
        .map(|u| DirectionPairings { label: u.label.clone(), per_gamma: Vec::with_capacity(per_regime.len()) })
        .collect();
    for regime in per_regime {
        for (d, v) in by_dir.iter_mut().zip(regime) {
            d.per_gamma.push(v);
        }
    }
    by_dir
}

/// The integral condition from precomputed pairings.
pub fn integral_from_pairings(
    s: &Scenario,
    pairings: &[DirectionPairings],
    lambda: &LambdaChoice,
    dt: f64,
) -> Result<ConditionReport> {
    let candidates = match lambda {
        LambdaChoice::Common(l) => vec![l.clone()],
        LambdaChoice::PerDirection(v) if !v.is_empty() => v.clone(),
        LambdaChoice::PerDirection(_) => return Err(Error::InvalidArgument("no candidate measures".into())),
    };
    for l in &candidates {
        check_lambda(s, l)?;
    }
    if pairings.is_empty() {
        return Err(Error::InvalidArgument("no directions to test".into()));
    }
    let m = s.gamma_count();
    let paths = pairings[0].per_gamma.first().map_or(0, Vec::len);
    if pairings.iter().any(|d| d.per_gamma.len() != m || d.per_gamma.iter().any(|v| v.len() != paths)) {
        return Err(Error::Dimension("pairings need one equally long sample per regime".into()));
    }
    let mut entries = Vec::with_capacity(pairings.len());
    for dir in pairings {
        let mut best: Option<ConditionEntry> = None;
        for l in &candidates {
            let samples: Vec<f64> =
                (0..paths).map(|p| -l.iter().zip(&dir.per_gamma).map(|(l, v)| l * v[p]).sum::<f64>()).collect();
            let est = Estimate::from_samples(&samples);
            let entry = ConditionEntry {
                label: dir.label.clone(),
                step: None,
                point: None,
                value: est.mean,
                std_err: est.std_err,
                tolerance: 4.0 * est.std_err + SCHEME_CONSTANT * dt,
                lambda: l.clone(),
            };
            if best.as_ref().is_none_or(|b| entry.value > b.value) {
                best = Some(entry);
            }
        }
        entries.push(best.expect("at least one measure"));
    }
    let worst = entries
        .iter()
        .min_by(|a, b| (a.value + a.tolerance).total_cmp(&(b.value + b.tolerance)))
        .expect("nonempty");
    let violated = worst.value < -worst.tolerance;
    let witness = violated.then(|| Witness {
        label: worst.label.clone(),
        step: None,
        point: None,
        value: worst.value,
        tolerance: worst.tolerance,
    });
    let extreme = entries.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    let mut notes = Vec::new();
    if let LambdaChoice::PerDirection(_) = lambda {
        notes.push("each direction uses its best measure on the argmax face".into());
    }
    Ok(ConditionReport {
        kind: ConditionKind::Integral,
        extreme,
        entries,
        lambda_used: candidates,
        verdict: if violated { ConditionVerdict::Violated } else { ConditionVerdict::Consistent },
        witness,
        notes,
    })
}

/// Inputs of the pointwise condition for one regime.
#[derive(Debug, Clone, Copy)]
pub struct PointwiseInputs<'a> {
    pub state: &'a StateEnsemble,
    pub s_op: &'a SOperatorProcess,
    pub nabla_s: &'a SOperatorProcess,
    /// `∇ū` on the grid, for every path or for the first [`POINTWISE_PATH_CAP`].
    pub nabla_control: &'a AdaptedProcess,
}

/// Per-path `G` contributions of one regime, laid out `[τ][point][path]`.
/// A single stored path means the contribution is the same on every path.
#[derive(Debug, Clone)]
pub struct PointwiseCells {
    pub gamma: usize,
    pub used_paths: usize,
    pub available_paths: usize,
    cells: Vec<Vec<Vec<f64>>>,
}

impl PointwiseCells {
    pub fn taus(&self) -> usize {
        self.cells.len()
    }

    fn sample(&self, k: usize, v: usize, p: usize) -> f64 {
        let row = &self.cells[k][v];
        row[if row.len() == 1 { 0 } else { p }]
    }
}

/// Unweighted per-path contributions of one regime to `G(τ, v)` at every `τ < T − dt`.
pub fn pointwise_cells(s: &Scenario, inp: &PointwiseInputs<'_>, points: &[Vec<f64>]) -> Result<PointwiseCells> {
    let (n, n1) = (s.state_dim(), s.control_dim());
    if points.is_empty() || points.iter().any(|v| v.len() != n1) {
        return Err(Error::InvalidArgument("control points missing or of the wrong length".into()));
    }
    let st = inp.state;
    let g = st.gamma;
    let grid = st.grid;
    let steps = grid.steps();
    let paths = st.x.paths();
    if inp.s_op.gamma != g || inp.nabla_s.gamma != g || inp.s_op.steps != steps || inp.nabla_s.steps != steps {
        return Err(Error::Dimension(format!("regime {g}: pointwise inputs do not line up")));
    }
    let nabla_paths = inp.nabla_control.paths();
    if (nabla_paths != paths && nabla_paths != paths.min(POINTWISE_PATH_CAP))
        || inp.nabla_control.dim() != n1
        || inp.nabla_control.steps() != steps
    {
        return Err(Error::Dimension("∇ū does not match the reference".into()));
    }
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let taus = steps.saturating_sub(1).max(1);
    // coefficient matrix shared by all paths
    let shared = inp.s_op.is_deterministic()
        && inp.nabla_s.is_deterministic()
        && sampled_path_independent(paths, steps, |p, k| {
            let mut pieces = SPieces::new(n, n1);
            pieces.jacobians(st, s, p, k);
            [pieces.ju, pieces.ku].concat()
        });
    let fixed = shared && st.control.is_path_independent() && inp.nabla_control.is_path_independent();
    let used_paths = if fixed { 1 } else { paths.min(POINTWISE_PATH_CAP) };
    let vmv = |mm: &[f64], a: &[f64], b: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n1 {
            if a[i] != 0.0 {
                acc += a[i] * (0..n1).map(|j| mm[i * n1 + j] * b[j]).sum::<f64>();
            }
        }
        acc
    };
    let cells: Vec<Vec<Vec<f64>>> = (0..taus)
        .into_par_iter()
        .map(|k| {
            let mut pieces = SPieces::new(n, n1);
            let mut out = vec![vec![0.0; used_paths]; points.len()];
            let mut mmat = vec![0.0; n1 * n1];
            let (mut mu, mut mtu, mut c, mut sn) = (vec![0.0; n1], vec![0.0; n1], vec![0.0; n1], vec![0.0; n]);
            let mut vmv_cache: Vec<f64> = Vec::new();
            for p in 0..used_paths {
                if p == 0 || !shared {
                    pieces.jacobians(st, s, p, k);
                    // M = ∂u aᵀ W² S* + ∂u bᵀ W² ∇S*
                    h_gram(&pieces.ju, inp.s_op.at(p, k), &w, n, n1, &mut mmat, false);
                    h_gram(&pieces.ku, inp.nabla_s.at(p, k), &w, n, n1, &mut mmat, true);
                    vmv_cache = points.iter().map(|v| vmv(&mmat, v, v)).collect();
                }
                // c = ∂u bᵀ W² S* ∇ū
                matvec(inp.s_op.at(p, k), n, n1, inp.nabla_control.at(p, k), &mut sn);
                for j in 0..n1 {
                    c[j] = (0..n).map(|a| pieces.ku[a * n1 + j] * w[a] * w[a] * sn[a]).sum();
                }
                let ubar = st.control.at(p, k);
                matvec(&mmat, n1, n1, ubar, &mut mu);
                crate::spaces::matvec_t(&mmat, n1, n1, ubar, &mut mtu);
                let base = crate::spaces::dot(ubar, &mu) + crate::spaces::dot(ubar, &c);
                for (vi, v) in points.iter().enumerate() {
                    // (v−ū)ᵀM(v−ū) − (v−ū)ᵀc
                    let lin: f64 = (0..n1).map(|i| v[i] * (mu[i] + mtu[i] + c[i])).sum();
                    out[vi][p] = vmv_cache[vi] - lin + base;
                }
            }
            out
        })
        .collect();
    Ok(PointwiseCells { gamma: g, used_paths, available_paths: paths, cells })
}

/// `G(τ, v) = Σ_γ λ_γ E[⟨∂u a d, S* d⟩ + ⟨∂u b d, ∇S* d⟩ − ⟨∂u b d, S* ∇ū⟩]` with
/// `d = v − ū(τ)`, swept over grid `τ < T − dt`. The condition requires `G ≤ 0`.
pub fn pointwise_condition(
    s: &Scenario,
    inputs: &[PointwiseInputs<'_>],
    points: &[Vec<f64>],
    lambda: &[f64],
) -> Result<ConditionReport> {
    check_lambda(s, lambda)?;
    if inputs.len() != s.gamma_count() || inputs.iter().enumerate().any(|(g, i)| i.state.gamma != g) {
        return Err(Error::InvalidArgument("one pointwise input per regime is required".into()));
    }
    let cells = inputs
        .iter()
        .enumerate()
        .filter(|(g, _)| lambda[*g] != 0.0)
        .map(|(_, inp)| pointwise_cells(s, inp, points))
        .collect::<Result<Vec<_>>>()?;
    pointwise_from_cells(s, &cells, points, lambda, inputs[0].state.grid.dt())
}

/// The pointwise condition from precomputed regime contributions. Regimes with
/// `λ_γ = 0` may be left out of `cells`.
pub fn pointwise_from_cells(
    s: &Scenario,
    cells: &[PointwiseCells],
    points: &[Vec<f64>],
    lambda: &[f64],
    dt: f64,
) -> Result<ConditionReport> {
    check_lambda(s, lambda)?;
    let active: Vec<usize> = (0..s.gamma_count()).filter(|&g| lambda[g] != 0.0).collect();
    let used: Vec<&PointwiseCells> = active
        .iter()
        .map(|&g| cells.iter().find(|c| c.gamma == g))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InvalidArgument("missing pointwise contribution for a weighted regime".into()))?;
    let taus = used[0].taus();
    if used.iter().any(|c| c.taus() != taus || c.cells.first().is_none_or(|r| r.len() != points.len())) {
        return Err(Error::Dimension("pointwise contributions differ in shape".into()));
    }
    let used_paths = used.iter().map(|c| c.used_paths).max().unwrap_or(1);
    let available = used[0].available_paths;
    let mut entries = Vec::with_capacity(taus * points.len());
    let mut samples = vec![0.0; used_paths];
    for k in 0..taus {
        for (vi, v) in points.iter().enumerate() {
            for (p, out) in samples.iter_mut().enumerate() {
                *out = active.iter().zip(&used).map(|(&g, c)| lambda[g] * c.sample(k, vi, p)).sum();
            }
            let est = Estimate::from_samples(&samples);
            entries.push(ConditionEntry {
                label: format!("v{vi}"),
                step: Some(k),
                point: Some(v.clone()),
                value: est.mean,
                std_err: est.std_err,
                tolerance: 4.0 * est.std_err + SCHEME_CONSTANT * dt,
                lambda: lambda.to_vec(),
            });
        }
    }
    let worst = entries
        .iter()
        .max_by(|a, b| (a.value - a.tolerance).total_cmp(&(b.value - b.tolerance)))
        .expect("nonempty");
    let violated = worst.value > worst.tolerance;
    let witness = violated.then(|| Witness {
        label: worst.label.clone(),
        step: worst.step,
        point: worst.point.clone(),
        value: worst.value,
        tolerance: worst.tolerance,
    });
    let extreme = entries.iter().map(|e| e.value).fold(f64::NEG_INFINITY, f64::max);
    let mut notes = vec!["τ sweep stops one step before T".to_string()];
    if used_paths == 1 {
        notes.push("all inputs path-independent; evaluated on one path".into());
    } else if used_paths < available {
        notes.push(format!("expectations over the first {used_paths} paths"));
    }
    Ok(ConditionReport {
        kind: ConditionKind::Pointwise,
        extreme,
        entries,
        lambda_used: vec![lambda.to_vec()],
        verdict: if violated { ConditionVerdict::Violated } else { ConditionVerdict::Consistent },
        witness,
        notes,
    })
}

/// Local averages around `τ` against the half pairing they should approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LebesgueProbe {
    /// `½ Σ_γ λ_γ E⟨φ(τ), ψ(τ)⟩_H`.
    pub half_pairing: f64,
    /// `(1/ε²) Σ_γ λ_γ E∫_τ^{τ+ε} ⟨φ(τ), ∫_τ^t e^{A(t−s)} ψ(s) ds⟩ dt` per ε.
    pub averages: Vec<f64>,
    /// Deviations `|average − half_pairing|` with their slopes.
    pub rate: RateReport,
}

/// Both time integrals by the trapezoid rule on the grid; each ε is rounded to a whole
/// number of steps.
pub fn lebesgue_probe(
    s: &Scenario,
    phi: &[AdaptedProcess],
    psi: &[AdaptedProcess],
    semigroup: &SemigroupSpec<f64>,
    grid_dt: f64,
    tau_step: usize,
    epsilons: &[f64],
    lambda: &[f64],
) -> Result<LebesgueProbe> {
    if phi.len() != lambda.len() || psi.len() != lambda.len() {
        return Err(Error::InvalidArgument("one φ and one ψ per regime are required".into()));
    }
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("no window sizes given".into()));
    }
    let steps = phi[0].steps();
    let widths: Vec<usize> = epsilons
        .iter()
        .map(|e| {
            let k = (e / grid_dt).round() as usize;
            if k == 0 || !(e.is_finite()) {
                Err(Error::InvalidArgument(format!("window {e} is shorter than one step")))
            } else {
                Ok(k)
            }
        })
        .collect::<Result<_>>()?;
    if tau_step + widths.iter().max().copied().unwrap_or(0) > steps {
        return Err(Error::InvalidArgument("τ + ε runs past the horizon".into()));
    }
    for (a, b) in phi.iter().zip(psi) {
        a.check_shape(b)?;
    }
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let prop = semigroup.propagator(grid_dt)?;
    let n = phi[0].dim();
    let paths = phi[0].paths();
    let mut half = 0.0;
    let mut averages = vec![0.0; widths.len()];
    for ((f, g), l) in phi.iter().zip(psi).zip(lambda) {
        if *l == 0.0 {
            continue;
        }
        half += l * 0.5 * (0..paths).map(|p| weighted_dot(&w, f.at(p, tau_step), g.at(p, tau_step))).sum::<f64>() / paths as f64;
        let sums: Vec<Vec<f64>> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let anchor = f.at(p, tau_step);
                let (mut inner, mut scratch, mut eg) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                let mut outer = 0.0;
                let mut res = vec![0.0; widths.len()];
                let maxw = *widths.iter().max().unwrap();
                // inner(t_j) = ∫_τ^{t_j} e^{A(t_j − s)} ψ(s) ds, outer trapezoid of ⟨φ(τ), inner⟩
                let mut prev = 0.0;
                for j in 1..=maxw {
                    let k = tau_step + j;
                    eg.copy_from_slice(g.at(p, k - 1));
                    prop.apply_in_place(&mut eg, &mut scratch);
                    prop.apply_in_place(&mut inner, &mut scratch);
                    for i in 0..n {
                        inner[i] += 0.5 * grid_dt * (eg[i] + g.at(p, k)[i]);
                    }
                    let cur = weighted_dot(&w, anchor, &inner);
                    outer += 0.5 * grid_dt * (prev + cur);
                    prev = cur;
                    for (r, wd) in res.iter_mut().zip(&widths) {
                        if *wd == j {
                            *r = outer;
                        }
                    }
                }
                res
            })
            .collect();
        for (i, wd) in widths.iter().enumerate() {
            let eps = *wd as f64 * grid_dt;
            averages[i] += l * sums.iter().map(|r| r[i]).sum::<f64>() / paths as f64 / (eps * eps);
        }
    }
    let eps: Vec<f64> = widths.iter().map(|w| *w as f64 * grid_dt).collect();
    let dev: Vec<f64> = averages.iter().map(|a| (a - half).abs()).collect();
    let rate = RateReport::from_values(eps, dev, 1e-12 * (1.0 + half.abs()));
    Ok(LebesgueProbe { half_pairing: half, averages, rate })
}

/// Sampled midpoint convexity of `v ↦ −Σ_γ λ_γ E∫⟨y_γ(v), S_γ* v⟩ dt` along random
/// segments of directions `c₀ + c₁W(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub segments: usize,
    /// Largest `f(mid) − ½(f(a) + f(b))`; positive values contradict convexity.
    pub worst_defect: f64,
    pub tolerance: f64,
    pub convex: bool,
    /// Always set: sampling cannot certify convexity.
    pub sampled_only: bool,
}

pub fn convexity_check(
    s: &Scenario,
    refs: &[GammaReference],
    sops: &[SOperatorProcess],
    lambda: &[f64],
    bundle: &BrownianBundle,
    segments: usize,
    seed: u64,
) -> Result<ConvexityReport> {
    check_refs(s, refs, sops)?;
    check_lambda(s, lambda)?;
    let n1 = s.control_dim();
    let grid = *bundle.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> (Vec<f64>, Vec<f64>) {
        let mut v = || (0..n1).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        (v(), v())
    };
    let direction = |c: &(Vec<f64>, Vec<f64>)| {
        AdaptedProcess::from_path_fn(bundle.paths(), grid.steps(), n1, SpaceTag::H1, |p, row| {
            for k in 0..=grid.steps() {
                let wk = bundle.level(p, k);
                for i in 0..n1 {
                    row[k * n1 + i] = c.0[i] + c.1[i] * wk;
                }
            }
        })
    };
    let value = |dv: &AdaptedProcess| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; bundle.paths()];
        for (g, (r, so)) in refs.iter().zip(sops).enumerate() {
            if lambda[g] == 0.0 {
                continue;
            }
            let v = pairing_samples(s, &r.state, so, dv, bundle)?;
            acc.iter_mut().zip(&v).for_each(|(a, v)| *a -= lambda[g] * v);
        }
        Ok(acc)
    };
    let mut worst = f64::NEG_INFINITY;
    let mut tol = 0.0;
    for _ in 0..segments {
        let (a, b) = (draw(), draw());
        let mid = (
            a.0.iter().zip(&b.0).map(|(x, y)| 0.5 * (x + y)).collect(),
            a.1.iter().zip(&b.1).map(|(x, y)| 0.5 * (x + y)).collect(),
        );
        let (fa, fb, fm) = (value(&direction(&a))?, value(&direction(&b))?, value(&direction(&mid))?);
        let defect: Vec<f64> = (0..bundle.paths()).map(|p| fm[p] - 0.5 * (fa[p] + fb[p])).collect();
        let est = Estimate::from_samples(&defect);
        if est.mean > worst {
            worst = est.mean;
            tol = 4.0 * est.std_err + SCHEME_CONSTANT * grid.dt();
        }
    }
    Ok(ConvexityReport { segments, worst_defect: worst, tolerance: tol, convex: worst <= tol, sampled_only: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointOptions};
    use crate::forward::simulate_state;
    use crate::paths::TimeGrid;
    use crate::scenario::builtin_example_one;

    fn references(s: &Scenario, paths: usize, steps: usize) -> (Vec<GammaReference>, BrownianBundle) {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let b = BrownianBundle::generate(g, paths, 17).unwrap();
        let refs = (0..s.gamma_count())
            .map(|gamma| {
                let state = simulate_state(s, gamma, &ControlProcess::zero(1), &g, &b).unwrap();
                let first = solve_first_adjoint(s, &state, &b, &AdjointOptions::default()).unwrap();
                let second = solve_second_adjoint(s, &state, &first, &b, &AdjointOptions::default()).unwrap();
                GammaReference { state, first, second }
            })
            .collect();
        (refs, b)
    }

    #[test]
    fn s_is_one_on_example_one() {
        let s = builtin_example_one();
        let (refs, _) = references(&s, 200, 20);
        for r in &refs {
            let so = assemble_s(&s, r, 60_000_000).unwrap();
            assert!(so.is_deterministic());
            for k in 0..=20 {
                assert_eq!(so.at(0, k), &[1.0]);
            }
            assert_eq!(nabla_s(&so).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn example_one_conditions_violated() {
        let s = builtin_example_one();
        let (refs, b) = references(&s, 20_000, 100);
        let sops: Vec<_> = refs.iter().map(|r| assemble_s(&s, r, 60_000_000).unwrap()).collect();
        let dirs = [ControlProcess::constant(vec![1.0]), ControlProcess::zero(1)];
        for l in [vec![1.0, 0.0], vec![0.0, 1.0]] {
            let rep = integral_condition(&s, &refs, &sops, &dirs, &LambdaChoice::Common(l.clone()), &b).unwrap();
            assert!((rep.entries[0].value + 0.5).abs() < 0.02, "{:?}", rep.entries[0]);
            assert_eq!(rep.entries[1].value, 0.0);
            assert_eq!(rep.verdict, ConditionVerdict::Violated);
            assert!(rep.witness.unwrap().label.contains("1.0"));
        }
        let nab: Vec<_> = sops.iter().map(|so| nabla_s(so).unwrap()).collect();
        let nu = AdaptedProcess::zeros(b.paths(), 100, 1, SpaceTag::H1);
        let inputs: Vec<_> = (0..2)
            .map(|g| PointwiseInputs { state: &refs[g].state, s_op: &sops[g], nabla_s: &nab[g], nabla_control: &nu })
            .collect();
        let rep = pointwise_condition(&s, &inputs, &[vec![1.0], vec![0.0]], &[1.0, 0.0]).unwrap();
        assert_eq!(rep.verdict, ConditionVerdict::Violated);
        for e in &rep.entries {
            let expect = if e.label == "v0" { 1.0 } else { 0.0 };
            assert_eq!(e.value, expect);
        }
        assert_eq!(rep.entries.len(), 2 * 99);
    }

    #[test]
    fn lebesgue_half_factor() {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 200).unwrap();
        let ones = AdaptedProcess::from_path_fn(3, 200, 1, SpaceTag::H, |_, row| row.fill(1.0));
        let ramp = AdaptedProcess::from_path_fn(3, 200, 1, SpaceTag::H, |_, row| {
            for k in 0..=200 {
                row[k] = g.node(k);
            }
        });
        let eps = [0.2, 0.1, 0.05, 0.025];
        let one = std::slice::from_ref(&ones);
        let r = lebesgue_probe(&s, one, one, &s.semigroup, g.dt(), 40, &eps, &[1.0]).unwrap();
        assert!(r.averages.iter().all(|a| (a - 0.5).abs() < 1e-12), "{r:?}");
        let r = lebesgue_probe(&s, &[ramp], one, &s.semigroup, g.dt(), 100, &eps, &[1.0]).unwrap();
        assert!(r.averages.iter().all(|a| (a - 0.25).abs() < 1e-12));
        let zero = AdaptedProcess::zeros(3, 200, 1, SpaceTag::H);
        let r = lebesgue_probe(&s, one, &[zero], &s.semigroup, g.dt(), 0, &eps, &[1.0]).unwrap();
        assert!(r.rate.exact);
        assert!(lebesgue_probe(&s, one, one, &s.semigroup, g.dt(), 190, &eps, &[1.0]).is_err());
    }
}
