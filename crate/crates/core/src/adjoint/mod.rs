//! First and second order adjoint processes on the Galerkin truncation.
//!
//! All operators are stored as row-major coordinate matrices acting on H
//! coordinates. Adjoints are taken in the weighted H inner product, and
//! coordinate gradients from the coefficient packs are converted to H gradients
//! by dividing by the squared weights.

mod regression;
mod transposition;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use regression::{BasisSpec, Regressor};
pub use transposition::{
    duality_identities, verify_operator_pairings, verify_relaxed_transposition, verify_transposition_first,
    verify_transposition_second, DualityResidual, FirstTestData, SecondTestData,
};

use crate::error::{Error, Result};
use crate::forward::{Linearization, StateEnsemble};
use crate::paths::{AdaptedProcess, BrownianBundle, TimeGrid};
use crate::scenario::{CoefficientPack, Scenario};
use crate::spaces::{matmul, matvec, SpaceTag};

/// Default scheme constant in `tolerance = 4·std_err + C·dt`.
pub const SCHEME_CONSTANT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointMethod {
    Regression,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjointOptions {
    pub basis: BasisSpec,
    /// Forced method; picked from the pack structure when absent.
    pub method: Option<AdjointMethod>,
    /// Second adjoint: refuse stochastic storage above this many values.
    pub max_operator_values: usize,
    /// Store `p_pre`, which only the transposition checks read.
    pub keep_pre: bool,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self { basis: BasisSpec::default(), method: None, max_operator_values: 60_000_000, keep_pre: true }
    }
}

/// `(p, q)` along a reference trajectory.
#[derive(Debug, Clone)]
pub struct AdjointFirst {
    pub gamma: usize,
    pub method: AdjointMethod,
    pub p: AdaptedProcess,
    pub q: AdaptedProcess,
    /// `E[e^{A*dt} p_{k+1} | F_k]`, the value the discrete duality pairs with
    /// forcing terms; equals `p` at `k = M`. Absent unless requested.
    pub p_pre: Option<AdaptedProcess>,
    pub basis_size: usize,
}

impl AdjointFirst {
    pub fn pre(&self) -> Result<&AdaptedProcess> {
        self.p_pre.as_ref().ok_or_else(|| Error::Unsupported("adjoint was solved without p_pre".into()))
    }
}

/// Operator-valued process, either one matrix per step or one per path and step.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorProcess {
    Deterministic { n: usize, values: Vec<Vec<f64>> },
    Stochastic { n: usize, paths: usize, steps: usize, values: Vec<f64> },
}

impl OperatorProcess {
    pub fn dim(&self) -> usize {
        match self {
            OperatorProcess::Deterministic { n, .. } | OperatorProcess::Stochastic { n, .. } => *n,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            OperatorProcess::Deterministic { values, .. } => values.len() - 1,
            OperatorProcess::Stochastic { steps, .. } => *steps,
        }
    }

    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        match self {
            OperatorProcess::Deterministic { values, .. } => &values[k],
            OperatorProcess::Stochastic { n, steps, values, .. } => {
                let s = n * n;
                let o = (path * (steps + 1) + k) * s;
                &values[o..o + s]
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, OperatorProcess::Deterministic { .. })
    }

    /// Path mean of entry `(i, j)` at step `k`.
    pub fn mean_entry(&self, k: usize, i: usize, j: usize) -> f64 {
        let n = self.dim();
        match self {
            OperatorProcess::Deterministic { values, .. } => values[k][i * n + j],
            OperatorProcess::Stochastic { paths, .. } => {
                (0..*paths).map(|p| self.at(p, k)[i * n + j]).sum::<f64>() / *paths as f64
            }
        }
    }

    /// Adds `c·I` at every step; used to build corrupted adjoints in tests.
    pub fn shifted(&self, c: f64) -> Self {
        let n = self.dim();
        let mut out = self.clone();
        let bump = |m: &mut [f64]| (0..n).for_each(|i| m[i * n + i] += c);
        match &mut out {
            OperatorProcess::Deterministic { values, .. } => values.iter_mut().for_each(|m| bump(m)),
            OperatorProcess::Stochastic { values, .. } => values.chunks_mut(n * n).for_each(bump),
        }
        out
    }
}

/// `(P, Q)` along a reference trajectory; `q` is `None` when it vanishes.
#[derive(Debug, Clone)]
pub struct AdjointSecond {
    pub gamma: usize,
    pub p: OperatorProcess,
    pub q: Option<OperatorProcess>,
    pub deterministic: bool,
}

/// `W⁻¹ Mᵀ W` for a coordinate matrix with squared weights `w2`.
pub(crate) fn h_adjoint(m: &[f64], n: usize, w2: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[j * n + i] * w2[j] / w2[i];
        }
    }
    out
}

/// `W⁻¹ M`: coordinate Hessian to H operator.
pub(crate) fn riesz_rows(m: &mut [f64], n: usize, w2: &[f64]) {
    for i in 0..n {
        m[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= w2[i]);
    }
}

/// `(I + dt L)` for a square matrix `L`.
fn shift_identity(l: &[f64], n: usize, dt: f64) -> Vec<f64> {
    let mut out: Vec<f64> = l.iter().map(|v| v * dt).collect();
    (0..n).for_each(|i| out[i * n + i] += 1.0);
    out
}

fn triple(a: &[f64], b: &[f64], c: &[f64], n: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; n * n];
    let mut out = vec![0.0; n * n];
    matmul(a, b, n, n, n, &mut tmp);
    matmul(&tmp, c, n, n, n, &mut out);
    out
}

/// `(I+dtJ)* X (I+dtJ) + dt K* X K − dt F`.
fn lyapunov_step(x: &[f64], j: &[f64], k: &[f64], f: &[f64], n: usize, dt: f64, w2: &[f64]) -> Vec<f64> {
    let ij = shift_identity(j, n, dt);
    let ij_star = h_adjoint(&ij, n, w2);
    let k_star = h_adjoint(k, n, w2);
    let mut out = triple(&ij_star, x, &ij, n);
    let kk = triple(&k_star, x, k, n);
    for i in 0..n * n {
        out[i] += dt * kk[i] - dt * f[i];
    }
    out
}

/// Reference control is the same on every path.
fn control_path_independent(xbar: &StateEnsemble) -> bool {
    xbar.control_deterministic || xbar.control.is_path_independent()
}

/// Pick the first adjoint method for this pack and reference control.
pub fn first_adjoint_method(s: &Scenario, xbar: &StateEnsemble) -> Result<AdjointMethod> {
    let st = s.pack(xbar.gamma)?.structure();
    Ok(if st.affine_in_state && st.quadratic_state_costs && control_path_independent(xbar) {
        AdjointMethod::ClosedForm
    } else {
        AdjointMethod::Regression
    })
}

/// Solves the first order adjoint along `xbar`.
pub fn solve_first_adjoint(
    s: &Scenario,
    xbar: &StateEnsemble,
    bundle: &BrownianBundle,
    opts: &AdjointOptions,
) -> Result<AdjointFirst> {
    if xbar.x.paths() != bundle.paths() || xbar.grid != *bundle.grid() {
        return Err(Error::Dimension("reference state was not simulated on this bundle".into()));
    }
    let method = match opts.method {
        Some(m) => m,
        None => first_adjoint_method(s, xbar)?,
    };
    if method == AdjointMethod::ClosedForm {
        let st = s.pack(xbar.gamma)?.structure();
        if !(st.affine_in_state && st.quadratic_state_costs && control_path_independent(xbar)) {
            return Err(Error::Unsupported(
                "closed form needs affine dynamics, quadratic costs and a deterministic control".into(),
            ));
        }
        first_closed_form(s, xbar, opts.keep_pre)
    } else {
        let mut basis = opts.basis;
        if !control_path_independent(xbar) {
            basis.brownian_degree = basis.brownian_degree.max(3);
        }
        first_regression(s, xbar, bundle, &basis, opts.keep_pre)
    }
}

fn terminal_p(pack: &dyn CoefficientPack, x: &[f64], w2: &[f64], out: &mut [f64]) {
    pack.terminal_cost_dx(x, out);
    out.iter_mut().zip(w2).for_each(|(v, w)| *v = -*v / w);
}

fn first_closed_form(s: &Scenario, xbar: &StateEnsemble, keep_pre: bool) -> Result<AdjointFirst> {
    let pack = s.pack(xbar.gamma)?.clone();
    let n = s.state_dim();
    let n1 = s.control_dim();
    let grid = xbar.grid;
    let m = grid.steps();
    let dt = grid.dt();
    let w2 = s.spaces.metric(SpaceTag::H);
    let prop = s.semigroup.propagator(dt)?;
    let e = prop.matrix();
    let e_star = h_adjoint(&e, n, &w2);
    let zero = vec![0.0; n];

    // Π and r at M, then backwards; Π̂ = E*Π_{k+1}E and r̂ = E*r_{k+1} are kept per step
    let mut pi = vec![0.0; n * n];
    pack.terminal_cost_dxx(&zero, &mut pi);
    riesz_rows(&mut pi, n, &w2);
    pi.iter_mut().for_each(|v| *v = -*v);
    let mut r = vec![0.0; n];
    terminal_p(pack.as_ref(), &zero, &w2, &mut r);

    let mut pi_all = vec![Vec::new(); m + 1];
    let mut r_all = vec![Vec::new(); m + 1];
    let mut pi_hat_all = vec![Vec::new(); m];
    let mut r_hat_all = vec![Vec::new(); m];
    let mut drift_all = vec![(Vec::new(), Vec::new(), Vec::new(), Vec::new()); m];
    pi_all[m] = pi.clone();
    r_all[m] = r.clone();
    let mut lin = Linearization::new(n, n1);
    for k in (0..m).rev() {
        let t = grid.node(k);
        let u = xbar.control.at(0, k);
        lin.fill(pack.as_ref(), t, &zero, u);
        let mut alpha = vec![0.0; n];
        let mut beta = vec![0.0; n];
        pack.drift(t, &zero, u, &mut alpha);
        pack.diffusion(t, &zero, u, &mut beta);
        let mut g = vec![0.0; n * n];
        pack.running_cost_dxx(t, &zero, u, &mut g);
        riesz_rows(&mut g, n, &w2);
        let mut gamma = vec![0.0; n];
        pack.running_cost_dx(t, &zero, u, &mut gamma);
        gamma.iter_mut().zip(&w2).for_each(|(v, w)| *v /= w);

        let pi_hat = triple(&e_star, &pi, &e, n);
        let mut r_hat = vec![0.0; n];
        matvec(&e_star, n, n, &r, &mut r_hat);
        let new_pi = lyapunov_step(&pi_hat, &lin.jx, &lin.kx, &g, n, dt, &w2);
        // r_k = (I+dtJ*)(Π̂α dt + r̂) + dt K*Π̂β − dt γ
        let mut inner = vec![0.0; n];
        matvec(&pi_hat, n, n, &alpha, &mut inner);
        inner.iter_mut().zip(&r_hat).for_each(|(v, rh)| *v = *v * dt + rh);
        let ij_star = h_adjoint(&shift_identity(&lin.jx, n, dt), n, &w2);
        let mut new_r = vec![0.0; n];
        matvec(&ij_star, n, n, &inner, &mut new_r);
        let mut pb = vec![0.0; n];
        matvec(&pi_hat, n, n, &beta, &mut pb);
        let k_star = h_adjoint(&lin.kx, n, &w2);
        let mut kpb = vec![0.0; n];
        matvec(&k_star, n, n, &pb, &mut kpb);
        for i in 0..n {
            new_r[i] += dt * kpb[i] - dt * gamma[i];
        }
        pi = new_pi;
        r = new_r;
        pi_all[k] = pi.clone();
        r_all[k] = r.clone();
        pi_hat_all[k] = pi_hat;
        r_hat_all[k] = r_hat;
        drift_all[k] = (lin.jx.clone(), lin.kx.clone(), alpha, beta);
    }
    if pi.iter().chain(&r).any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0, time: 0.0, detail: "closed-form adjoint overflow".into() });
    }

    let paths = xbar.x.paths();
    let mut p = AdaptedProcess::zeros(paths, m, n, SpaceTag::H);
    let mut q = AdaptedProcess::zeros(paths, m, n, SpaceTag::H);
    let stride = (m + 1) * n;
    let mut pre = keep_pre.then(|| AdaptedProcess::zeros(paths, m, n, SpaceTag::H));
    let pre_rows: Vec<Option<&mut [f64]>> = match pre.as_mut() {
        Some(pp) => pp.values_mut().chunks_mut(stride).map(Some).collect(),
        None => (0..paths).map(|_| None).collect(),
    };
    p.values_mut()
        .par_chunks_mut(stride)
        .zip(q.values_mut().par_chunks_mut(stride))
        .zip(pre_rows)
        .enumerate()
        .for_each(|(path, ((prow, qrow), pre_row))| {
            let mut local = Vec::new();
            let pre_row = pre_row.unwrap_or_else(|| {
                local = vec![0.0; stride];
                &mut local
            });
            let mut tmp = vec![0.0; n];
            let mut arg = vec![0.0; n];
            for k in 0..=m {
                let x = xbar.x.at(path, k);
                let pk = &mut prow[k * n..(k + 1) * n];
                if k == m {
                    terminal_p(pack.as_ref(), x, &w2, pk);
                    pre_row[k * n..(k + 1) * n].copy_from_slice(pk);
                    continue;
                }
                matvec(&pi_all[k], n, n, x, pk);
                pk.iter_mut().zip(&r_all[k]).for_each(|(v, r)| *v += r);
                let (jx, kx, alpha, beta) = &drift_all[k];
                // p̃ = Π̂(x + (Jx+α)dt) + r̂
                matvec(jx, n, n, x, &mut tmp);
                for i in 0..n {
                    arg[i] = x[i] + (tmp[i] + alpha[i]) * dt;
                }
                let pre_k = &mut pre_row[k * n..(k + 1) * n];
                matvec(&pi_hat_all[k], n, n, &arg, pre_k);
                pre_k.iter_mut().zip(&r_hat_all[k]).for_each(|(v, r)| *v += r);
                // q = Π̂(Kx+β)
                matvec(kx, n, n, x, &mut tmp);
                tmp.iter_mut().zip(beta).for_each(|(v, b)| *v += b);
                matvec(&pi_hat_all[k], n, n, &tmp, &mut qrow[k * n..(k + 1) * n]);
            }
        });
    Ok(AdjointFirst { gamma: xbar.gamma, method: AdjointMethod::ClosedForm, p, q, p_pre: pre, basis_size: 0 })
}

fn first_regression(
    s: &Scenario,
    xbar: &StateEnsemble,
    bundle: &BrownianBundle,
    basis: &BasisSpec,
    keep_pre: bool,
) -> Result<AdjointFirst> {
    let pack = s.pack(xbar.gamma)?.clone();
    let n = s.state_dim();
    let grid = xbar.grid;
    let m = grid.steps();
    let dt = grid.dt();
    let paths = bundle.paths();
    let w2 = s.spaces.metric(SpaceTag::H);
    let prop_star = s.semigroup.propagator(dt)?.adjoint(s.spaces.weights(SpaceTag::H));

    let mut p = AdaptedProcess::zeros(paths, m, n, SpaceTag::H);
    let mut q = AdaptedProcess::zeros(paths, m, n, SpaceTag::H);
    let mut pre = keep_pre.then(|| AdaptedProcess::zeros(paths, m, n, SpaceTag::H));
    for path in 0..paths {
        terminal_p(pack.as_ref(), xbar.x.at(path, m), &w2, p.at_mut(path, m));
        if let Some(pre) = pre.as_mut() {
            let v = p.at(path, m).to_vec();
            pre.at_mut(path, m).copy_from_slice(&v);
        }
    }
    let mut basis_size = 0;
    let mut targets = vec![0.0; paths * 2 * n];
    for k in (0..m).rev() {
        let t = grid.node(k);
        targets.par_chunks_mut(2 * n).enumerate().for_each(|(path, row)| {
            let (ph, pq) = row.split_at_mut(n);
            ph.copy_from_slice(p.at(path, k + 1));
            let mut scratch = vec![0.0; n];
            prop_star.apply_in_place(ph, &mut scratch);
            let dw = bundle.increment(path, k);
            for i in 0..n {
                pq[i] = ph[i] * dw / dt;
            }
        });
        let reg = Regressor::at_step(basis, &xbar.x, bundle, k)?;
        basis_size = basis_size.max(reg.size());
        let fit = reg.project(&targets, 2 * n)?;
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map(|path| {
                let row = &fit[path * 2 * n..(path + 1) * 2 * n];
                let (pt, qk) = row.split_at(n);
                let x = xbar.x.at(path, k);
                let u = xbar.control.at(path, k);
                let mut pk = pt.to_vec();
                let mut tmp = vec![0.0; n];
                let wp: Vec<f64> = pt.iter().zip(&w2).map(|(a, w)| a * w).collect();
                pack.drift_dx_apply_t(t, x, u, &wp, &mut tmp);
                let wq: Vec<f64> = qk.iter().zip(&w2).map(|(a, w)| a * w).collect();
                let mut tmp2 = vec![0.0; n];
                pack.diffusion_dx_apply_t(t, x, u, &wq, &mut tmp2);
                let mut grad = vec![0.0; n];
                pack.running_cost_dx(t, x, u, &mut grad);
                for i in 0..n {
                    pk[i] += dt * ((tmp[i] + tmp2[i] - grad[i]) / w2[i]);
                }
                (pk, qk.to_vec(), pt.to_vec())
            })
            .collect();
        for (path, (pk, qk, pt)) in rows.into_iter().enumerate() {
            if pk.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k, time: t, detail: "first adjoint is not finite".into() });
            }
            p.at_mut(path, k).copy_from_slice(&pk);
            q.at_mut(path, k).copy_from_slice(&qk);
            if let Some(pre) = pre.as_mut() {
                pre.at_mut(path, k).copy_from_slice(&pt);
            }
        }
    }
    Ok(AdjointFirst { gamma: xbar.gamma, method: AdjointMethod::Regression, p, q, p_pre: pre, basis_size })
}

/// True when `(P, Q)` can be taken deterministic with `Q ≡ 0`: affine dynamics,
/// quadratic costs, frozen Jacobians free of the (possibly random) control, and a
/// sampled check that `J`, `K`, the cost Hessians agree on the first paths.
pub fn second_adjoint_is_deterministic(s: &Scenario, xbar: &StateEnsemble) -> Result<bool> {
    let pack = s.pack(xbar.gamma)?;
    let st = pack.structure();
    if !(st.affine_in_state && st.quadratic_state_costs) {
        return Ok(false);
    }
    if !(control_path_independent(xbar) || st.state_jacobian_control_free) {
        return Ok(false);
    }
    let n = s.state_dim();
    let n1 = s.control_dim();
    let m = xbar.grid.steps();
    let sample = xbar.x.paths().min(16);
    let steps: Vec<usize> = [0, m / 3, (2 * m) / 3, m.saturating_sub(1)].into_iter().collect();
    let mut reference = Linearization::new(n, n1);
    let mut other = Linearization::new(n, n1);
    let mut g0 = vec![0.0; n * n];
    let mut g1 = vec![0.0; n * n];
    for &k in &steps {
        let t = xbar.grid.node(k);
        reference.fill(pack.as_ref(), t, xbar.x.at(0, k), xbar.control.at(0, k));
        pack.running_cost_dxx(t, xbar.x.at(0, k), xbar.control.at(0, k), &mut g0);
        for path in 1..sample {
            other.fill(pack.as_ref(), t, xbar.x.at(path, k), xbar.control.at(path, k));
            pack.running_cost_dxx(t, xbar.x.at(path, k), xbar.control.at(path, k), &mut g1);
            if other.jx != reference.jx || other.kx != reference.kx || g0 != g1 {
                return Ok(false);
            }
        }
    }
    pack.terminal_cost_dxx(xbar.x.at(0, m), &mut g0);
    for path in 1..sample {
        pack.terminal_cost_dxx(xbar.x.at(path, m), &mut g1);
        if g0 != g1 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Coordinate matrix of `∂xx H` at one point (`⟨p,a⟩_H + ⟨q,b⟩_H − g`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn hamiltonian_hessian(
    pack: &dyn CoefficientPack,
    t: f64,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    q: &[f64],
    w: &[f64],
    out: &mut [f64],
) {
    let n = x.len();
    pack.running_cost_dxx(t, x, u, out);
    out.iter_mut().for_each(|v| *v = -*v);
    let st = pack.structure();
    if st.affine_in_state {
        return;
    }
    let mut ei = vec![0.0; n];
    let mut ej = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for i in 0..n {
        ei.iter_mut().for_each(|v| *v = 0.0);
        ei[i] = 1.0;
        for j in 0..n {
            ej.iter_mut().for_each(|v| *v = 0.0);
            ej[j] = 1.0;
            pack.drift_dxx(t, x, u, &ei, &ej, &mut buf);
            let mut acc = crate::spaces::weighted_dot(w, p, &buf);
            pack.diffusion_dxx(t, x, u, &ei, &ej, &mut buf);
            acc += crate::spaces::weighted_dot(w, q, &buf);
            out[i * n + j] += acc;
        }
    }
}

/// Solves the second order adjoint along `xbar` with first adjoint `adj1`.
pub fn solve_second_adjoint(
    s: &Scenario,
    xbar: &StateEnsemble,
    adj1: &AdjointFirst,
    bundle: &BrownianBundle,
    opts: &AdjointOptions,
) -> Result<AdjointSecond> {
    adj1.p.check_shape(&xbar.x)?;
    if xbar.x.paths() != bundle.paths() {
        return Err(Error::Dimension("reference state was not simulated on this bundle".into()));
    }
    if second_adjoint_is_deterministic(s, xbar)? {
        second_deterministic(s, xbar)
    } else {
        let mut basis = opts.basis;
        if !control_path_independent(xbar) {
            basis.brownian_degree = basis.brownian_degree.max(3);
        }
        second_regression(s, xbar, adj1, bundle, &basis, opts.max_operator_values)
    }
}

fn second_deterministic(s: &Scenario, xbar: &StateEnsemble) -> Result<AdjointSecond> {
    let pack = s.pack(xbar.gamma)?.clone();
    let n = s.state_dim();
    let n1 = s.control_dim();
    let grid = xbar.grid;
    let m = grid.steps();
    let dt = grid.dt();
    let w2 = s.spaces.metric(SpaceTag::H);
    let e = s.semigroup.propagator(dt)?.matrix();
    let e_star = h_adjoint(&e, n, &w2);
    let mut pm = vec![0.0; n * n];
    pack.terminal_cost_dxx(xbar.x.at(0, m), &mut pm);
    riesz_rows(&mut pm, n, &w2);
    pm.iter_mut().for_each(|v| *v = -*v);
    let mut values = vec![Vec::new(); m + 1];
    values[m] = pm;
    let mut lin = Linearization::new(n, n1);
    for k in (0..m).rev() {
        let t = grid.node(k);
        let (x, u) = (xbar.x.at(0, k), xbar.control.at(0, k));
        lin.fill(pack.as_ref(), t, x, u);
        // F = −∂xx H; affine dynamics leave only the cost Hessian
        let mut f = vec![0.0; n * n];
        pack.running_cost_dxx(t, x, u, &mut f);
        riesz_rows(&mut f, n, &w2);
        let hat = triple(&e_star, &values[k + 1], &e, n);
        let next = lyapunov_step(&hat, &lin.jx, &lin.kx, &f, n, dt, &w2);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k, time: t, detail: "second adjoint is not finite".into() });
        }
        values[k] = next;
    }
    Ok(AdjointSecond {
        gamma: xbar.gamma,
        p: OperatorProcess::Deterministic { n, values },
        q: None,
        deterministic: true,
    })
}

fn second_regression(
    s: &Scenario,
    xbar: &StateEnsemble,
    adj1: &AdjointFirst,
    bundle: &BrownianBundle,
    basis: &BasisSpec,
    max_values: usize,
) -> Result<AdjointSecond> {
    let pack = s.pack(xbar.gamma)?.clone();
    let n = s.state_dim();
    let n1 = s.control_dim();
    let grid = xbar.grid;
    let m = grid.steps();
    let dt = grid.dt();
    let paths = bundle.paths();
    let nn = n * n;
    if paths.saturating_mul(m + 1).saturating_mul(nn) > max_values {
        return Err(Error::Unsupported(format!(
            "stochastic second adjoint needs {} values per process; reduce paths, steps or modes",
            paths * (m + 1) * nn
        )));
    }
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let w2 = s.spaces.metric(SpaceTag::H);
    let e = s.semigroup.propagator(dt)?.matrix();
    let e_star = h_adjoint(&e, n, &w2);
    let mut pv = vec![0.0; paths * (m + 1) * nn];
    let mut qv = vec![0.0; paths * (m + 1) * nn];
    let at = |path: usize, k: usize| (path * (m + 1) + k) * nn;
    for path in 0..paths {
        let o = at(path, m);
        let slot = &mut pv[o..o + nn];
        pack.terminal_cost_dxx(xbar.x.at(path, m), slot);
        riesz_rows(slot, n, &w2);
        slot.iter_mut().for_each(|v| *v = -*v);
    }
    let mut targets = vec![0.0; paths * 2 * nn];
    for k in (0..m).rev() {
        let t = grid.node(k);
        let pv_ref = &pv;
        targets.par_chunks_mut(2 * nn).enumerate().for_each(|(path, row)| {
            let o = at(path, k + 1);
            let hat = triple(&e_star, &pv_ref[o..o + nn], &e, n);
            let mut lin = Linearization::new(n, n1);
            lin.fill(pack.as_ref(), t, xbar.x.at(path, k), xbar.control.at(path, k));
            let dw = bundle.increment(path, k);
            // M = I + J dt + K ΔW
            let mut mm = shift_identity(&lin.jx, n, dt);
            mm.iter_mut().zip(&lin.kx).for_each(|(a, b)| *a += b * dw);
            let m_star = h_adjoint(&mm, n, &w2);
            let full = triple(&m_star, &hat, &mm, n);
            let (a, b) = row.split_at_mut(nn);
            a.copy_from_slice(&full);
            b.iter_mut().zip(&hat).for_each(|(v, h)| *v = h * dw / dt);
        });
        let reg = Regressor::at_step(basis, &xbar.x, bundle, k)?;
        let fit = reg.project(&targets, 2 * nn)?;
        let fit_ref = &fit;
        let rows: Vec<Vec<f64>> = (0..paths)
            .into_par_iter()
            .map(|path| {
                let (x, u) = (xbar.x.at(path, k), xbar.control.at(path, k));
                let mut f = vec![0.0; nn];
                hamiltonian_hessian(pack.as_ref(), t, x, u, adj1.p.at(path, k), adj1.q.at(path, k), &w, &mut f);
                // F = −∂xx H as an H operator
                riesz_rows(&mut f, n, &w2);
                let row = &fit_ref[path * 2 * nn..path * 2 * nn + nn];
                row.iter().zip(&f).map(|(a, fv)| a + dt * fv).collect()
            })
            .collect();
        for (path, r) in rows.into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k, time: t, detail: "second adjoint is not finite".into() });
            }
            let o = at(path, k);
            pv[o..o + nn].copy_from_slice(&r);
            qv[o..o + nn].copy_from_slice(&fit[path * 2 * nn + nn..(path + 1) * 2 * nn]);
        }
    }
    Ok(AdjointSecond {
        gamma: xbar.gamma,
        p: OperatorProcess::Stochastic { n, paths, steps: m, values: pv },
        q: Some(OperatorProcess::Stochastic { n, paths, steps: m, values: qv }),
        deterministic: false,
    })
}

/// CSV rows `t,stat,value,gamma,label` with path means of `p`, `q` and the entries of `P`.
pub fn write_adjoint_csv<W: Write>(
    out: &mut csv::Writer<W>,
    grid: &TimeGrid,
    adj1: &AdjointFirst,
    adj2: Option<&AdjointSecond>,
    gamma: &str,
    label: &str,
) -> Result<()> {
    let wrap = |e: csv::Error| Error::Io(e.to_string());
    let n = adj1.p.dim();
    for k in 0..=grid.steps() {
        let t = format!("{}", grid.node(k));
        for i in 0..n {
            out.write_record([t.as_str(), &format!("p_mean[{i}]"), &format!("{}", adj1.p.mean(k, i)), gamma, label])
                .map_err(wrap)?;
            out.write_record([t.as_str(), &format!("q_mean[{i}]"), &format!("{}", adj1.q.mean(k, i)), gamma, label])
                .map_err(wrap)?;
        }
        if let Some(a2) = adj2 {
            for i in 0..n {
                for j in 0..n {
                    let v = a2.p.mean_entry(k, i, j);
                    out.write_record([t.as_str(), &format!("P[{i},{j}]"), &format!("{v}"), gamma, label])
                        .map_err(wrap)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_state, ControlProcess};
    use crate::scenario::builtin_example_one;

    fn example_one_reference(gamma: usize, u: f64, paths: usize) -> (Scenario, StateEnsemble, BrownianBundle) {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = BrownianBundle::generate(g, paths, 5).unwrap();
        let x = simulate_state(&s, gamma, &ControlProcess::constant(vec![u]), &g, &b).unwrap();
        (s, x, b)
    }

    #[test]
    fn example_one_zero_control_adjoints() {
        for gamma in 0..2 {
            let (s, x, b) = example_one_reference(gamma, 0.0, 200);
            let a1 = solve_first_adjoint(&s, &x, &b, &AdjointOptions::default()).unwrap();
            assert_eq!(a1.method, AdjointMethod::ClosedForm);
            assert!(a1.p.values().iter().chain(a1.q.values()).all(|v| *v == 0.0));
            let a2 = solve_second_adjoint(&s, &x, &a1, &b, &AdjointOptions::default()).unwrap();
            assert!(a2.deterministic && a2.q.is_none());
            for k in 0..=50 {
                assert!((a2.p.at(0, k)[0] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closed_form_and_regression_agree() {
        // γ=1 with u ≡ 1: x = t + W and p = E[x(T) | F_t] = x + T − t, q = 1
        let (s, x, b) = example_one_reference(0, 1.0, 400);
        let cf = solve_first_adjoint(&s, &x, &b, &AdjointOptions::default()).unwrap();
        let opts = AdjointOptions { method: Some(AdjointMethod::Regression), ..Default::default() };
        let rg = solve_first_adjoint(&s, &x, &b, &opts).unwrap();
        for path in 0..400 {
            for k in 0..=50 {
                let expect = x.x.at(path, k)[0] + 1.0 - x.grid.node(k);
                assert!((cf.p.at(path, k)[0] - expect).abs() < 1e-12);
                if k < 50 {
                    assert!((cf.q.at(path, k)[0] - 1.0).abs() < 1e-12);
                }
            }
        }
        // regression noise per step is O(sqrt(dt / paths)) and accumulates like a walk
        let gap = rg.p.sup_rms_distance(&cf.p, &[1.0]).unwrap();
        assert!(gap < 0.1, "{gap}");
        // regression q is the noisy estimate of the constant 1
        let qmean = (0..400).map(|p| rg.q.at(p, 10)[0]).sum::<f64>() / 400.0;
        assert!((qmean - 1.0).abs() < 0.3);
    }

    #[test]
    fn closed_form_rejected_for_random_control() {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let b = BrownianBundle::generate(g, 100, 5).unwrap();
        let u = ControlProcess::wiener(1, |_, w, o| o[0] = w.tanh(), None);
        let x = simulate_state(&s, 0, &u, &g, &b).unwrap();
        let opts = AdjointOptions { method: Some(AdjointMethod::ClosedForm), ..Default::default() };
        assert!(solve_first_adjoint(&s, &x, &b, &opts).is_err());
    }

    #[test]
    fn shifted_operator_adds_identity() {
        let p = OperatorProcess::Deterministic { n: 2, values: vec![vec![0.0; 4]; 3] };
        let s = p.shifted(1.0);
        assert_eq!(s.at(0, 1), &[1.0, 0.0, 0.0, 1.0]);
    }
}
