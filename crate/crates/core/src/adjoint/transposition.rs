//! Monte Carlo checks of the duality pairings that define the adjoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdjointFirst, AdjointSecond, SCHEME_CONSTANT};
use crate::error::{Error, Result};
use crate::forward::{second_order_forcing, Linearization, StateEnsemble, VariationalEnsemble};
use crate::paths::{BrownianBundle, Estimate};
use crate::scenario::{CoefficientPack, Scenario};
use crate::spaces::{matvec, weighted_dot, SpaceTag};

/// Residual of one pairing identity with its tolerance budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityResidual {
    pub identity: String,
    /// Largest `|E[lhs − rhs]|` over the trials.
    pub value: f64,
    /// Tolerance attached to the trial achieving `value`.
    pub tolerance: f64,
    /// Largest residual-to-tolerance ratio over the trials.
    pub ratio: f64,
    pub pass: bool,
    pub trials: usize,
    pub paths: usize,
    pub seed: u64,
    pub descriptor: String,
}

impl DualityResidual {
    fn from_trials(identity: &str, trials: &[(Estimate, f64)], paths: usize, seed: u64, descriptor: String) -> Self {
        let mut value = 0.0;
        let mut tolerance = 0.0;
        let mut ratio: f64 = 0.0;
        for (est, tol) in trials {
            let r = est.mean.abs();
            if r >= value {
                value = r;
                tolerance = *tol;
            }
            ratio = ratio.max(if *tol > 0.0 { r / tol } else if r > 0.0 { f64::INFINITY } else { 0.0 });
        }
        Self {
            identity: identity.into(),
            value,
            tolerance,
            ratio,
            pass: ratio <= 1.0,
            trials: trials.len(),
            paths,
            seed,
            descriptor,
        }
    }
}

/// `4·std_err + C·dt`.
fn budget(est: &Estimate, dt: f64) -> f64 {
    4.0 * est.std_err + SCHEME_CONSTANT * dt
}

/// Test data for the first order pairing: `η = η₀ + η₁W(t)`,
/// `v₁(s) = v₁₀ + v₁₁W(s)`, constant `v₂`, started at grid index `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTestData {
    pub start: usize,
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
    pub v1_0: Vec<f64>,
    pub v1_1: Vec<f64>,
    pub v2: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect()
}

impl FirstTestData {
    /// Draws with start times in the first half of the grid and unit-scale data.
    pub fn random_set(n: usize, steps: usize, trials: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Uniform::new_inclusive(0, steps / 2).expect("valid range");
        let sc = 1.0 / (n as f64).sqrt();
        (0..trials)
            .map(|_| Self {
                start: start.sample(&mut rng),
                eta0: normal_vec(&mut rng, n, sc),
                eta1: normal_vec(&mut rng, n, sc),
                v1_0: normal_vec(&mut rng, n, sc),
                v1_1: normal_vec(&mut rng, n, sc),
                v2: normal_vec(&mut rng, n, sc),
            })
            .collect()
    }

    /// Zero initial value and drift forcing, unit noise forcing.
    pub fn unit_noise(n: usize) -> Self {
        Self {
            start: 0,
            eta0: vec![0.0; n],
            eta1: vec![0.0; n],
            v1_0: vec![0.0; n],
            v1_1: vec![0.0; n],
            v2: vec![1.0; n],
        }
    }
}

/// Test data for the operator pairing: `ξᵢ = aᵢ + bᵢW(t)` with constant forcings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondTestData {
    pub start: usize,
    pub xi1: (Vec<f64>, Vec<f64>),
    pub xi2: (Vec<f64>, Vec<f64>),
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl SecondTestData {
    pub fn random_set(n: usize, steps: usize, trials: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Uniform::new_inclusive(0, steps / 2).expect("valid range");
        let sc = 1.0 / (n as f64).sqrt();
        (0..trials)
            .map(|_| Self {
                start: start.sample(&mut rng),
                xi1: (normal_vec(&mut rng, n, sc), normal_vec(&mut rng, n, sc)),
                xi2: (normal_vec(&mut rng, n, sc), normal_vec(&mut rng, n, sc)),
                u1: normal_vec(&mut rng, n, sc),
                u2: normal_vec(&mut rng, n, sc),
                v1: normal_vec(&mut rng, n, sc),
                v2: normal_vec(&mut rng, n, sc),
            })
            .collect()
    }

    /// `ξ₁ = ξ₂ = 1`, no forcing.
    pub fn unit_initial(n: usize) -> Self {
        let z = vec![0.0; n];
        Self {
            start: 0,
            xi1: (vec![1.0; n], z.clone()),
            xi2: (vec![1.0; n], z.clone()),
            u1: z.clone(),
            u2: z.clone(),
            v1: z.clone(),
            v2: z,
        }
    }
}

/// Jacobians at one step, shared by all paths when they cannot differ.
struct StepJacobians {
    shared: Option<Linearization>,
}

fn shared_jacobians(s: &Scenario, xbar: &StateEnsemble) -> Result<(bool, bool)> {
    let st = s.pack(xbar.gamma)?.structure();
    let fixed_u = xbar.control_deterministic || xbar.control.is_path_independent();
    Ok((st.affine_in_state && (st.state_jacobian_control_free || fixed_u), st.affine_in_state && fixed_u))
}

impl StepJacobians {
    fn new(pack: &dyn CoefficientPack, xbar: &StateEnsemble, k: usize, share: bool) -> Self {
        let shared = share.then(|| {
            let mut l = Linearization::new(xbar.x.dim(), xbar.control.dim());
            l.fill(pack, xbar.grid.node(k), xbar.x.at(0, k), xbar.control.at(0, k));
            l
        });
        Self { shared }
    }

    fn get<'a>(
        &'a self,
        pack: &dyn CoefficientPack,
        xbar: &StateEnsemble,
        path: usize,
        k: usize,
        local: &'a mut Linearization,
    ) -> &'a Linearization {
        match &self.shared {
            Some(l) => l,
            None => {
                local.fill(pack, xbar.grid.node(k), xbar.x.at(path, k), xbar.control.at(path, k));
                local
            }
        }
    }
}

fn affine(a: &[f64], b: &[f64], w: f64, out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = a[i] + b[i] * w;
    }
}

fn check_inputs(xbar: &StateEnsemble, bundle: &BrownianBundle, n: usize) -> Result<()> {
    if xbar.x.paths() != bundle.paths() || xbar.grid != *bundle.grid() {
        return Err(Error::Dimension("reference state was not simulated on this bundle".into()));
    }
    if xbar.x.dim() != n {
        return Err(Error::Dimension("test data dimension differs from H".into()));
    }
    Ok(())
}

/// Checks the first order transposition identity for each test datum: the forward
/// test equation `dφ = (Aφ + v₁)ds + v₂dW`, `φ(t) = η`, paired against `(p, q)`.
/// The terminal value uses `−∂x h(x̄(T))` from the pack, not the stored `p(T)`.
pub fn verify_transposition_first(
    s: &Scenario,
    xbar: &StateEnsemble,
    adj: &AdjointFirst,
    bundle: &BrownianBundle,
    data: &[FirstTestData],
    seed: u64,
) -> Result<DualityResidual> {
    let n = s.state_dim();
    check_inputs(xbar, bundle, n)?;
    adj.p.check_shape(&xbar.x)?;
    let pack = s.pack(xbar.gamma)?.clone();
    let grid = xbar.grid;
    let (m, dt) = (grid.steps(), grid.dt());
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let pre_all = adj.pre()?;
    let prop = s.semigroup.propagator(dt)?;
    let (share_x, _) = shared_jacobians(s, xbar)?;
    let jac: Vec<StepJacobians> = (0..m).map(|k| StepJacobians::new(pack.as_ref(), xbar, k, share_x)).collect();
    let mut trials = Vec::with_capacity(data.len());
    for d in data {
        if d.start >= m || [&d.eta0, &d.eta1, &d.v1_0, &d.v1_1, &d.v2].iter().any(|v| v.len() != n) {
            return Err(Error::InvalidArgument("test datum has the wrong shape or start".into()));
        }
        let samples: Vec<f64> = (0..bundle.paths())
            .into_par_iter()
            .map(|path| {
                let mut phi = vec![0.0; n];
                affine(&d.eta0, &d.eta1, bundle.level(path, d.start), &mut phi);
                let mut lhs = 0.0;
                let mut rhs = weighted_dot(&w, &phi, adj.p.at(path, d.start));
                let (mut v1, mut tmp, mut grad, mut scratch) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                let mut local = Linearization::new(n, s.control_dim());
                for k in d.start..m {
                    let t = grid.node(k);
                    let lin = jac[k].get(pack.as_ref(), xbar, path, k, &mut local);
                    let (pre, q) = (pre_all.at(path, k), adj.q.at(path, k));
                    // ⟨φ, f⟩ with f = −J*p̃ − K*q + ∇g
                    matvec(&lin.jx, n, n, &phi, &mut tmp);
                    let mut pair = -weighted_dot(&w, &tmp, pre);
                    matvec(&lin.kx, n, n, &phi, &mut tmp);
                    pair -= weighted_dot(&w, &tmp, q);
                    pack.running_cost_dx(t, xbar.x.at(path, k), xbar.control.at(path, k), &mut grad);
                    pair += grad.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
                    lhs -= dt * pair;
                    affine(&d.v1_0, &d.v1_1, bundle.level(path, k), &mut v1);
                    rhs += dt * (weighted_dot(&w, &v1, pre) + weighted_dot(&w, &d.v2, q));
                    let dw = bundle.increment(path, k);
                    for i in 0..n {
                        phi[i] += v1[i] * dt + d.v2[i] * dw;
                    }
                    prop.apply_in_place(&mut phi, &mut scratch);
                }
                pack.terminal_cost_dx(xbar.x.at(path, m), &mut grad);
                lhs -= grad.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
                lhs - rhs
            })
            .collect();
        let est = Estimate::from_samples(&samples);
        trials.push((est, budget(&est, dt)));
    }
    Ok(DualityResidual::from_trials(
        "first_order_transposition",
        &trials,
        bundle.paths(),
        seed,
        format!("{} draws of (t, eta, v1, v2)", data.len()),
    ))
}

/// Checks the operator pairing of `(P, Q)` against the test processes
/// `dφᵢ = ((A+J)φᵢ + uᵢ)ds + (Kφᵢ + vᵢ)dW`, `φᵢ(t) = ξᵢ`.
pub fn verify_transposition_second(
    s: &Scenario,
    xbar: &StateEnsemble,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    bundle: &BrownianBundle,
    data: &[SecondTestData],
    seed: u64,
) -> Result<DualityResidual> {
    Ok(verify_operator_pairings(s, xbar, adj1, adj2, bundle, data, seed)?.0)
}

/// Relaxed form of the operator pairing; at truncation level the operator pair is
/// `(ξ, u, v) ↦ Qφ` and its adjoint counterpart `Q*φ`, so this shares `(P, Q)`.
pub fn verify_relaxed_transposition(
    s: &Scenario,
    xbar: &StateEnsemble,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    bundle: &BrownianBundle,
    data: &[SecondTestData],
    seed: u64,
) -> Result<DualityResidual> {
    Ok(verify_operator_pairings(s, xbar, adj1, adj2, bundle, data, seed)?.1)
}

/// `⟨X a, b⟩_H` for a coordinate matrix `X`.
fn op_pair(x: &[f64], a: &[f64], b: &[f64], w: &[f64], tmp: &mut [f64]) -> f64 {
    let n = a.len();
    matvec(x, n, n, a, tmp);
    weighted_dot(w, tmp, b)
}

/// `Xᵀ(w² ∘ b)`, so that `⟨X a, b⟩_H = a · Xᵀ(w² ∘ b)`.
fn pull_back(x: &[f64], b: &[f64], w2: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let bi = w2[i] * b[i];
        for j in 0..n {
            out[j] += x[i * n + j] * bi;
        }
    }
    out
}

/// Path-independent factors of the `P` terms for one datum: with deterministic `P`
/// the four pairings reduce to dot products with these vectors.
struct FixedP {
    /// Per step: `Pᵀw²u₂`, `Pᵀw²v₂`, `Pu₁`, `Pv₁`.
    steps: Vec<[Vec<f64>; 4]>,
}

impl FixedP {
    fn new(adj2: &AdjointSecond, d: &SecondTestData, w2: &[f64]) -> Self {
        let n = d.u1.len();
        let steps = (d.start..adj2.p.steps())
            .map(|k| {
                let pk = adj2.p.at(0, k);
                let (mut pu1, mut pv1) = (vec![0.0; n], vec![0.0; n]);
                matvec(pk, n, n, &d.u1, &mut pu1);
                matvec(pk, n, n, &d.v1, &mut pv1);
                [pull_back(pk, &d.u2, w2), pull_back(pk, &d.v2, w2), pu1, pv1]
            })
            .collect();
        Self { steps }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Both arrangements of the operator pairing from one pass over the test processes:
/// the `Q`-process form and the relaxed form. They differ only in the `Q` terms.
pub fn verify_operator_pairings(
    s: &Scenario,
    xbar: &StateEnsemble,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    bundle: &BrownianBundle,
    data: &[SecondTestData],
    seed: u64,
) -> Result<(DualityResidual, DualityResidual)> {
    let n = s.state_dim();
    check_inputs(xbar, bundle, n)?;
    let pack = s.pack(xbar.gamma)?.clone();
    let grid = xbar.grid;
    let (m, dt) = (grid.steps(), grid.dt());
    if adj2.p.dim() != n || adj2.p.steps() != m {
        return Err(Error::Dimension("second adjoint does not match the reference state".into()));
    }
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let w2 = s.spaces.metric(SpaceTag::H);
    let prop = s.semigroup.propagator(dt)?;
    let st = pack.structure();
    let sparse = pack.sparse_products();
    let (share_x, _) = shared_jacobians(s, xbar)?;
    let jac: Vec<StepJacobians> =
        (0..m).map(|k| StepJacobians::new(pack.as_ref(), xbar, k, share_x && !sparse)).collect();
    let affine_pack = st.affine_in_state;
    // constant x-Hessian of g: evaluated once per step, skipped when it vanishes
    let fixed_hess: Option<Vec<Option<Vec<f64>>>> = (affine_pack && st.quadratic_state_costs).then(|| {
        (0..m)
            .map(|k| {
                let mut h = vec![0.0; n * n];
                pack.running_cost_dxx(grid.node(k), xbar.x.at(0, k), xbar.control.at(0, k), &mut h);
                h.iter().any(|v| *v != 0.0).then_some(h)
            })
            .collect()
    });
    let mut trials = Vec::with_capacity(data.len());
    let mut relaxed = Vec::with_capacity(data.len());
    for d in data {
        let shapes = [&d.xi1.0, &d.xi1.1, &d.xi2.0, &d.xi2.1, &d.u1, &d.u2, &d.v1, &d.v2];
        if d.start >= m || shapes.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidArgument("test datum has the wrong shape or start".into()));
        }
        let fixed_p = adj2.deterministic.then(|| FixedP::new(adj2, d, &w2));
        let samples: Vec<(f64, f64)> = (0..bundle.paths())
            .into_par_iter()
            .map(|path| {
                let mut f1 = vec![0.0; n];
                let mut f2 = vec![0.0; n];
                let w0 = bundle.level(path, d.start);
                affine(&d.xi1.0, &d.xi1.1, w0, &mut f1);
                affine(&d.xi2.0, &d.xi2.1, w0, &mut f2);
                let mut tmp = vec![0.0; n];
                let mut rhs = op_pair(adj2.p.at(path, d.start), &f1, &f2, &w, &mut tmp);
                let mut q_terms = (0.0, 0.0);
                let mut lhs = 0.0;
                let (mut k1, mut k2, mut buf, mut scratch) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                let (mut qa, mut qb, mut k2v) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                let mut local = Linearization::new(n, s.control_dim());
                let mut hess = vec![0.0; n * n];
                for k in d.start..m {
                    let t = grid.node(k);
                    let (x, u) = (xbar.x.at(path, k), xbar.control.at(path, k));
                    // ⟨Fφ₁, φ₂⟩ with F = −∂xx H
                    let f_pair = match &fixed_hess {
                        Some(hs) => hs[k].as_ref().map_or(0.0, |h| {
                            matvec(h, n, n, &f1, &mut buf);
                            dot(&buf, &f2)
                        }),
                        None if affine_pack => {
                            pack.running_cost_dxx(t, x, u, &mut hess);
                            matvec(&hess, n, n, &f1, &mut buf);
                            dot(&buf, &f2)
                        }
                        None => {
                            super::hamiltonian_hessian(pack.as_ref(), t, x, u, adj1.p.at(path, k), adj1.q.at(path, k), &w, &mut hess);
                            matvec(&hess, n, n, &f1, &mut buf);
                            -dot(&buf, &f2)
                        }
                    };
                    lhs -= dt * f_pair;
                    let lin = if sparse {
                        pack.diffusion_dx_apply(t, x, u, &f1, &mut k1);
                        pack.diffusion_dx_apply(t, x, u, &f2, &mut k2);
                        None
                    } else {
                        let lin = jac[k].get(pack.as_ref(), xbar, path, k, &mut local);
                        matvec(&lin.kx, n, n, &f1, &mut k1);
                        matvec(&lin.kx, n, n, &f2, &mut k2);
                        Some(lin)
                    };
                    for i in 0..n {
                        k2v[i] = k2[i] + d.v2[i];
                    }
                    let acc = match &fixed_p {
                        Some(fp) => {
                            let [g_u2, g_v2, p_u1, p_v1] = &fp.steps[k - d.start];
                            dot(&f1, g_u2) + weighted_dot(&w, p_u1, &f2) + dot(&k1, g_v2) + weighted_dot(&w, p_v1, &k2v)
                        }
                        None => {
                            let pk = adj2.p.at(path, k);
                            op_pair(pk, &f1, &d.u2, &w, &mut tmp)
                                + op_pair(pk, &d.u1, &f2, &w, &mut tmp)
                                + op_pair(pk, &k1, &d.v2, &w, &mut tmp)
                                + op_pair(pk, &d.v1, &k2v, &w, &mut tmp)
                        }
                    };
                    rhs += dt * acc;
                    if let Some(q) = &adj2.q {
                        let qk = q.at(path, k);
                        // ⟨v₁, Q*φ₂⟩ + ⟨Qφ₁, v₂⟩
                        q_terms.0 += dt * (op_pair(qk, &d.v1, &f2, &w, &mut tmp) + op_pair(qk, &f1, &d.v2, &w, &mut tmp));
                        matvec(qk, n, n, &f1, &mut qa);
                        let qk_star = super::h_adjoint(qk, n, &w2);
                        matvec(&qk_star, n, n, &f2, &mut qb);
                        q_terms.1 += dt * (weighted_dot(&w, &d.v1, &qb) + weighted_dot(&w, &qa, &d.v2));
                    }
                    let dw = bundle.increment(path, k);
                    match lin {
                        Some(lin) => matvec(&lin.jx, n, n, &f1, &mut buf),
                        None => pack.drift_dx_apply(t, x, u, &f1, &mut buf),
                    }
                    for i in 0..n {
                        f1[i] += (buf[i] + d.u1[i]) * dt + (k1[i] + d.v1[i]) * dw;
                    }
                    match lin {
                        Some(lin) => matvec(&lin.jx, n, n, &f2, &mut buf),
                        None => pack.drift_dx_apply(t, x, u, &f2, &mut buf),
                    }
                    for i in 0..n {
                        f2[i] += (buf[i] + d.u2[i]) * dt + (k2[i] + d.v2[i]) * dw;
                    }
                    prop.apply_in_place(&mut f1, &mut scratch);
                    prop.apply_in_place(&mut f2, &mut scratch);
                }
                // ⟨P_T φ₁, φ₂⟩ with P_T = −∂xx h from the pack
                pack.terminal_cost_dxx(xbar.x.at(path, m), &mut hess);
                matvec(&hess, n, n, &f1, &mut buf);
                lhs -= dot(&buf, &f2);
                (lhs - rhs - q_terms.0, lhs - rhs - q_terms.1)
            })
            .collect();
        let v: Vec<f64> = samples.iter().map(|p| p.0).collect();
        let r: Vec<f64> = samples.iter().map(|p| p.1).collect();
        let (ev, er) = (Estimate::from_samples(&v), Estimate::from_samples(&r));
        trials.push((ev, budget(&ev, dt)));
        relaxed.push((er, budget(&er, dt)));
    }
    let mode = if adj2.q.is_none() { "; Q vanishes (deterministic P)" } else { "" };
    let note = format!("{} draws of (t, xi1, xi2, u1, u2, v1, v2){mode}", data.len());
    Ok((
        DualityResidual::from_trials("operator_transposition", &trials, bundle.paths(), seed, note.clone()),
        DualityResidual::from_trials("relaxed_transposition", &relaxed, bundle.paths(), seed, note),
    ))
}

/// The three pairing identities linking `y`, `z` with `(p, q)` and `(P, Q)`:
/// terminal cost gradient against `y(T)` and `z(T)`, and the terminal Hessian
/// quadratic form in `y(T)`.
pub fn duality_identities(
    s: &Scenario,
    xbar: &StateEnsemble,
    var: &VariationalEnsemble,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    bundle: &BrownianBundle,
) -> Result<Vec<DualityResidual>> {
    let n = s.state_dim();
    let n1 = s.control_dim();
    check_inputs(xbar, bundle, n)?;
    var.y.check_shape(&xbar.x)?;
    let z = var
        .z
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("second variation has not been simulated".into()))?;
    let pack = s.pack(xbar.gamma)?.clone();
    let grid = xbar.grid;
    let (m, dt) = (grid.steps(), grid.dt());
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let pre_all = adj1.pre()?;
    let (_, share_all) = shared_jacobians(s, xbar)?;
    let jac: Vec<StepJacobians> = (0..m).map(|k| StepJacobians::new(pack.as_ref(), xbar, k, share_all)).collect();

    let rows: Vec<[f64; 3]> = (0..bundle.paths())
        .into_par_iter()
        .map(|path| {
            let mut local = Linearization::new(n, n1);
            let (mut bu, mut du, mut a2, mut b2, mut tmp, mut grad) =
                (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let (mut ky, mut py) = (vec![0.0; n], vec![0.0; n]);
            let mut hess = vec![0.0; n * n];
            let mut r = [0.0; 3];
            for k in 0..m {
                let t = grid.node(k);
                let lin = jac[k].get(pack.as_ref(), xbar, path, k, &mut local);
                let (x, u) = (xbar.x.at(path, k), xbar.control.at(path, k));
                let (y, zk, dv) = (var.y.at(path, k), z.at(path, k), var.delta_u.at(path, k));
                let (pre, p, q) = (pre_all.at(path, k), adj1.p.at(path, k), adj1.q.at(path, k));
                matvec(&lin.ju, n, n1, dv, &mut bu);
                matvec(&lin.ku, n, n1, dv, &mut du);
                pack.running_cost_dx(t, x, u, &mut grad);
                let gy: f64 = grad.iter().zip(y).map(|(a, b)| a * b).sum();
                let gz: f64 = grad.iter().zip(zk).map(|(a, b)| a * b).sum();
                r[0] += dt * (weighted_dot(&w, pre, &bu) + weighted_dot(&w, q, &du) + gy);
                second_order_forcing(pack.as_ref(), false, t, x, u, y, dv, &mut a2, &mut tmp);
                second_order_forcing(pack.as_ref(), true, t, x, u, y, dv, &mut b2, &mut tmp);
                r[1] += dt * (weighted_dot(&w, pre, &a2) + weighted_dot(&w, q, &b2) + gz);
                let pk = adj2.p.at(path, k);
                let mut acc = op_pair(pk, y, &bu, &w, &mut tmp);
                acc += op_pair(pk, &bu, y, &w, &mut tmp);
                matvec(&lin.kx, n, n, y, &mut ky);
                acc += op_pair(pk, &ky, &du, &w, &mut tmp);
                acc += op_pair(pk, &du, &ky, &w, &mut tmp);
                acc += op_pair(pk, &du, &du, &w, &mut tmp);
                // square of the Euler drift increment, O(dt) in total
                acc += dt * op_pair(pk, &bu, &bu, &w, &mut tmp);
                if let Some(qp) = &adj2.q {
                    acc += 2.0 * op_pair(qp.at(path, k), y, &du, &w, &mut tmp);
                }
                // ∂xx H(y, y)
                super::hamiltonian_hessian(pack.as_ref(), t, x, u, p, q, &w, &mut hess);
                matvec(&hess, n, n, y, &mut py);
                acc -= py.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                r[2] += dt * acc;
            }
            let xm = xbar.x.at(path, m);
            pack.terminal_cost_dx(xm, &mut grad);
            let (ym, zm) = (var.y.at(path, m), z.at(path, m));
            let l0: f64 = grad.iter().zip(ym).map(|(a, b)| a * b).sum();
            let l1: f64 = grad.iter().zip(zm).map(|(a, b)| a * b).sum();
            pack.terminal_cost_dxx(xm, &mut hess);
            matvec(&hess, n, n, ym, &mut py);
            let l2: f64 = py.iter().zip(ym).map(|(a, b)| a * b).sum();
            [l0 + r[0], l1 + r[1], l2 + r[2]]
        })
        .collect();
    let names = ["first_variation_identity", "second_variation_identity", "quadratic_identity"];
    Ok((0..3)
        .map(|i| {
            let samples: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let est = Estimate::from_samples(&samples);
            DualityResidual::from_trials(
                names[i],
                &[(est, budget(&est, dt))],
                bundle.paths(),
                bundle.seed(),
                "lhs + integral of the paired forcing terms".into(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointOptions};
    use crate::forward::{simulate_state, simulate_variations, ControlProcess};
    use crate::paths::TimeGrid;
    use crate::scenario::builtin_example_one;

    fn setup(gamma: usize, u: f64, paths: usize) -> (Scenario, StateEnsemble, BrownianBundle, AdjointFirst, AdjointSecond) {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = BrownianBundle::generate(g, paths, 11).unwrap();
        let x = simulate_state(&s, gamma, &ControlProcess::constant(vec![u]), &g, &b).unwrap();
        let a1 = solve_first_adjoint(&s, &x, &b, &AdjointOptions::default()).unwrap();
        let a2 = solve_second_adjoint(&s, &x, &a1, &b, &AdjointOptions::default()).unwrap();
        (s, x, b, a1, a2)
    }

    #[test]
    fn zero_adjoint_zero_data_is_exact() {
        let (s, x, b, a1, _) = setup(0, 0.0, 100);
        let mut d = FirstTestData::unit_noise(1);
        d.v2 = vec![0.0];
        let r = verify_transposition_first(&s, &x, &a1, &b, &[d], 1).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn first_pairing_holds_away_from_zero_control() {
        // u ≡ 0.5 makes p = x + (T − t)/2 nonzero
        let (s, x, b, a1, _) = setup(0, 0.5, 4000);
        let data = FirstTestData::random_set(1, 50, 5, 9);
        let r = verify_transposition_first(&s, &x, &a1, &b, &data, 9).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_q_rejected() {
        let (s, x, b, mut a1, _) = setup(0, 0.0, 2000);
        a1.q.values_mut().iter_mut().for_each(|v| *v += 1.0);
        let r = verify_transposition_first(&s, &x, &a1, &b, &[FirstTestData::unit_noise(1)], 1).unwrap();
        assert!(r.value > 0.1 && r.ratio > 10.0, "{r:?}");
    }

    #[test]
    fn operator_pairing_and_mutant() {
        let (s, x, b, a1, a2) = setup(0, 0.0, 2000);
        let data = SecondTestData::random_set(1, 50, 5, 4);
        let r = verify_transposition_second(&s, &x, &a1, &a2, &b, &data, 4).unwrap();
        assert!(r.pass, "{r:?}");
        let rr = verify_relaxed_transposition(&s, &x, &a1, &a2, &b, &data, 4).unwrap();
        assert!(rr.pass);
        let bad = AdjointSecond { p: a2.p.shifted(1.0), ..a2.clone() };
        let m = verify_transposition_second(&s, &x, &a1, &bad, &b, &[SecondTestData::unit_initial(1)], 4).unwrap();
        assert!(m.value > 0.5 && m.ratio > 10.0, "{m:?}");
    }

    #[test]
    fn identities_on_example_one() {
        for gamma in 0..2 {
            let (s, x, b, a1, a2) = setup(gamma, 0.0, 20_000);
            let v = simulate_variations(&s, &x, &ControlProcess::constant(vec![1.0]), &b).unwrap();
            let ids = duality_identities(&s, &x, &v, &a1, &a2, &b).unwrap();
            for r in &ids {
                assert!(r.pass, "{r:?}");
            }
        }
    }
}
