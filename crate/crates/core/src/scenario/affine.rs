//! Configurable polynomial coefficient family: affine in `(x, u)` with optional
//! bilinear `x·u` coupling and optional quadratic terms; quadratic costs.

use serde::{Deserialize, Serialize};

use super::{CoefficientPack, PackStructure};
use crate::error::{Error, Result};

/// One vector field `f(x, u) = c + F x + G u + Σ_j u_j N_j x + ½ xᵀQ_i x + ½ uᵀR_i u`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSpec {
    pub offset: Vec<f64>,
    pub state: Vec<Vec<f64>>,
    pub control: Vec<Vec<f64>>,
    /// One `N×N` matrix per control coordinate.
    pub bilinear: Vec<Vec<Vec<f64>>>,
    /// One `N×N` matrix per output coordinate.
    pub state_quadratic: Vec<Vec<Vec<f64>>>,
    /// One `N₁×N₁` matrix per output coordinate.
    pub control_quadratic: Vec<Vec<Vec<f64>>>,
}

/// `g = ½xᵀQx + xᵀSu + ½uᵀRu + qᵀx + rᵀu`, `h = ½xᵀHx + ηᵀx`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    pub state: Vec<Vec<f64>>,
    pub cross: Vec<Vec<f64>>,
    pub control: Vec<Vec<f64>>,
    pub state_linear: Vec<f64>,
    pub control_linear: Vec<f64>,
    pub terminal: Vec<Vec<f64>>,
    pub terminal_linear: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineBilinearSpec {
    pub drift: FieldSpec,
    pub diffusion: FieldSpec,
    pub cost: CostSpec,
}

#[derive(Debug, Clone, PartialEq)]
struct Field {
    offset: Vec<f64>,
    state: Vec<f64>,
    control: Vec<f64>,
    bilinear: Vec<Vec<f64>>,
    state_quadratic: Vec<Vec<f64>>,
    control_quadratic: Vec<Vec<f64>>,
}

fn dense(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(vec![0.0; r * c]);
    }
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a {r}x{c} matrix")));
    }
    Ok(rows.concat())
}

fn vector(v: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(vec![0.0; n]);
    }
    if v.len() != n {
        return Err(Error::Config(format!("{what} must have length {n}")));
    }
    Ok(v.to_vec())
}

fn symmetrize(m: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
}

fn stack(list: &[Vec<Vec<f64>>], count: usize, r: usize, what: &str, sym: bool) -> Result<Vec<Vec<f64>>> {
    if list.is_empty() {
        return Ok(Vec::new());
    }
    if list.len() != count {
        return Err(Error::Config(format!("{what} needs {count} matrices")));
    }
    list.iter()
        .map(|m| {
            let mut d = dense(m, r, r, what)?;
            if sym {
                symmetrize(&mut d, r);
            }
            Ok(d)
        })
        .collect()
}

fn quad(m: &[f64], v: &[f64], w: &[f64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        if v[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            s += v[i] * m[i * n + j] * w[j];
        }
    }
    s
}

impl Field {
    fn from_spec(spec: &FieldSpec, n: usize, n1: usize, what: &str) -> Result<Self> {
        let bilinear = if spec.bilinear.is_empty() {
            Vec::new()
        } else {
            if spec.bilinear.len() != n1 {
                return Err(Error::Config(format!("{what}.bilinear needs {n1} matrices")));
            }
            spec.bilinear
                .iter()
                .map(|m| dense(m, n, n, &format!("{what}.bilinear")))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            offset: vector(&spec.offset, n, &format!("{what}.offset"))?,
            state: dense(&spec.state, n, n, &format!("{what}.state"))?,
            control: dense(&spec.control, n, n1, &format!("{what}.control"))?,
            bilinear,
            state_quadratic: stack(&spec.state_quadratic, n, n, &format!("{what}.state_quadratic"), true)?,
            control_quadratic: stack(&spec.control_quadratic, n, n1, &format!("{what}.control_quadratic"), true)?,
        })
    }

    fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = x.len();
        let n1 = u.len();
        for i in 0..n {
            let mut s = self.offset[i];
            s += crate::spaces::dot(&self.state[i * n..(i + 1) * n], x);
            s += crate::spaces::dot(&self.control[i * n1..(i + 1) * n1], u);
            for (j, nj) in self.bilinear.iter().enumerate() {
                if u[j] != 0.0 {
                    s += u[j] * crate::spaces::dot(&nj[i * n..(i + 1) * n], x);
                }
            }
            if let Some(q) = self.state_quadratic.get(i) {
                s += 0.5 * quad(q, x, x);
            }
            if let Some(r) = self.control_quadratic.get(i) {
                s += 0.5 * quad(r, u, u);
            }
            out[i] = s;
        }
    }

    fn dx(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = x.len();
        out.copy_from_slice(&self.state);
        for (j, nj) in self.bilinear.iter().enumerate() {
            if u[j] != 0.0 {
                out.iter_mut().zip(nj).for_each(|(o, v)| *o += u[j] * v);
            }
        }
        for (i, q) in self.state_quadratic.iter().enumerate() {
            for k in 0..n {
                out[i * n + k] += crate::spaces::dot(&q[k * n..(k + 1) * n], x);
            }
        }
    }

    fn du(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = x.len();
        let n1 = u.len();
        out.copy_from_slice(&self.control);
        for (j, nj) in self.bilinear.iter().enumerate() {
            for i in 0..n {
                out[i * n1 + j] += crate::spaces::dot(&nj[i * n..(i + 1) * n], x);
            }
        }
        for (i, r) in self.control_quadratic.iter().enumerate() {
            for k in 0..n1 {
                out[i * n1 + k] += crate::spaces::dot(&r[k * n1..(k + 1) * n1], u);
            }
        }
    }

    fn dxx(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, q) in self.state_quadratic.iter().enumerate() {
            out[i] = quad(q, v, w);
        }
    }

    fn dxu(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        let n = v.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, nj) in self.bilinear.iter().enumerate() {
            if w[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                out[i] += w[j] * crate::spaces::dot(&nj[i * n..(i + 1) * n], v);
            }
        }
    }

    fn duu(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, r) in self.control_quadratic.iter().enumerate() {
            out[i] = quad(r, v, w);
        }
    }

    fn affine_in_state(&self) -> bool {
        self.state_quadratic.iter().all(|q| q.iter().all(|v| *v == 0.0))
    }

    fn control_free_jacobian(&self) -> bool {
        self.bilinear.iter().all(|m| m.iter().all(|v| *v == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineBilinearPack {
    n: usize,
    n1: usize,
    drift: Field,
    diffusion: Field,
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    ql: Vec<f64>,
    rl: Vec<f64>,
    h: Vec<f64>,
    hl: Vec<f64>,
}

impl AffineBilinearPack {
    pub fn new(spec: &AffineBilinearSpec, n: usize, n1: usize) -> Result<Self> {
        let mut q = dense(&spec.cost.state, n, n, "cost.state")?;
        symmetrize(&mut q, n);
        let mut r = dense(&spec.cost.control, n1, n1, "cost.control")?;
        symmetrize(&mut r, n1);
        let mut h = dense(&spec.cost.terminal, n, n, "cost.terminal")?;
        symmetrize(&mut h, n);
        Ok(Self {
            n,
            n1,
            drift: Field::from_spec(&spec.drift, n, n1, "drift")?,
            diffusion: Field::from_spec(&spec.diffusion, n, n1, "diffusion")?,
            q,
            s: dense(&spec.cost.cross, n, n1, "cost.cross")?,
            r,
            ql: vector(&spec.cost.state_linear, n, "cost.state_linear")?,
            rl: vector(&spec.cost.control_linear, n1, "cost.control_linear")?,
            h,
            hl: vector(&spec.cost.terminal_linear, n, "cost.terminal_linear")?,
        })
    }
}

impl CoefficientPack for AffineBilinearPack {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.n1
    }
    fn drift(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.drift.eval(x, u, out)
    }
    fn diffusion(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.diffusion.eval(x, u, out)
    }
    fn drift_dx(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.drift.dx(x, u, out)
    }
    fn drift_du(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.drift.du(x, u, out)
    }
    fn diffusion_dx(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.diffusion.dx(x, u, out)
    }
    fn diffusion_du(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.diffusion.du(x, u, out)
    }
    fn drift_dxx(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        self.drift.dxx(v, w, out)
    }
    fn drift_dxu(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        self.drift.dxu(v, w, out)
    }
    fn drift_duu(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        self.drift.duu(v, w, out)
    }
    fn diffusion_dxx(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        self.diffusion.dxx(v, w, out)
    }
    fn diffusion_dxu(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        self.diffusion.dxu(v, w, out)
    }
    fn diffusion_duu(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        self.diffusion.duu(v, w, out)
    }
    fn running_cost(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        let mut s = 0.5 * quad(&self.q, x, x) + 0.5 * quad(&self.r, u, u);
        for i in 0..self.n {
            s += x[i] * crate::spaces::dot(&self.s[i * self.n1..(i + 1) * self.n1], u);
        }
        s + crate::spaces::dot(&self.ql, x) + crate::spaces::dot(&self.rl, u)
    }
    fn running_cost_dx(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = crate::spaces::dot(&self.q[i * self.n..(i + 1) * self.n], x)
                + crate::spaces::dot(&self.s[i * self.n1..(i + 1) * self.n1], u)
                + self.ql[i];
        }
    }
    fn running_cost_du(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        crate::spaces::matvec_t(&self.s, self.n, self.n1, x, out);
        for j in 0..self.n1 {
            out[j] += crate::spaces::dot(&self.r[j * self.n1..(j + 1) * self.n1], u) + self.rl[j];
        }
    }
    fn running_cost_dxx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.q)
    }
    fn running_cost_dxu(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.s)
    }
    fn running_cost_duu(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.r)
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        0.5 * quad(&self.h, x, x) + crate::spaces::dot(&self.hl, x)
    }
    fn terminal_cost_dx(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = crate::spaces::dot(&self.h[i * self.n..(i + 1) * self.n], x) + self.hl[i];
        }
    }
    fn terminal_cost_dxx(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.h)
    }
    fn structure(&self) -> PackStructure {
        PackStructure {
            affine_in_state: self.drift.affine_in_state() && self.diffusion.affine_in_state(),
            state_jacobian_control_free: self.drift.control_free_jacobian()
                && self.diffusion.control_free_jacobian(),
            quadratic_state_costs: self.s.iter().all(|v| *v == 0.0),
        }
    }
}
