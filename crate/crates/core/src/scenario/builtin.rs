//! The two built-in scenarios: a scalar two-regime problem and a coupled stochastic
//! heat system on (0,1) in the sine basis.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    CoefficientPack, ControlBlock, ControlBlockKind, ControlSet, PackStructure, Scenario,
    UncertaintyModel,
};
use crate::error::{Error, Result};
use crate::spaces::{sine_product_tensor, SemigroupSpec, SpaceRegistry};

/// Scalar regimes: `Noisy` has `dx = u dt + u dW`, running cost `½u²`; `Quiet` has
/// `dx = u dt` with no noise, running cost `¼u⁴`. Both carry terminal cost `−½x²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleOnePack {
    Noisy,
    Quiet,
}

impl CoefficientPack for ExampleOnePack {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }
    fn diffusion(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = match self {
            ExampleOnePack::Noisy => u[0],
            ExampleOnePack::Quiet => 0.0,
        };
    }
    fn drift_dx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_du(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn diffusion_dx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_du(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = match self {
            ExampleOnePack::Noisy => 1.0,
            ExampleOnePack::Quiet => 0.0,
        };
    }
    fn drift_dxx(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_dxu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_duu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_dxx(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_dxu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_duu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _t: f64, _x: &[f64], u: &[f64]) -> f64 {
        match self {
            ExampleOnePack::Noisy => 0.5 * u[0] * u[0],
            ExampleOnePack::Quiet => 0.25 * u[0].powi(4),
        }
    }
    fn running_cost_dx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost_du(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = match self {
            ExampleOnePack::Noisy => u[0],
            ExampleOnePack::Quiet => u[0].powi(3),
        };
    }
    fn running_cost_dxx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost_dxu(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost_duu(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = match self {
            ExampleOnePack::Noisy => 1.0,
            ExampleOnePack::Quiet => 3.0 * u[0] * u[0],
        };
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        -0.5 * x[0] * x[0]
    }
    fn terminal_cost_dx(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -x[0];
    }
    fn terminal_cost_dxx(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = -1.0;
    }
    fn structure(&self) -> PackStructure {
        PackStructure {
            affine_in_state: true,
            state_jacobian_control_free: true,
            quadratic_state_costs: true,
        }
    }
}

/// Scalar two-regime problem on [0,1] with U = [−1,1], Γ = {1,2}, Λ the full simplex.
pub fn builtin_example_one() -> Scenario {
    Scenario {
        name: "example1".into(),
        spaces: SpaceRegistry::unit(1, 1),
        semigroup: SemigroupSpec::Diagonal { eigenvalues: vec![0.0] },
        packs: vec![Arc::new(ExampleOnePack::Noisy), Arc::new(ExampleOnePack::Quiet)],
        uncertainty: UncertaintyModel::discrete(vec!["1".into(), "2".into()]),
        control_set: ControlSet::interval(-1.0, 1.0),
        horizon: 1.0,
        initial_state: vec![0.0],
        malliavin_regular: true,
        state_blocks: vec![(0, 1)],
    }
}

/// Constant block coefficients of one regime of the heat system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleTwoCoefficients {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
    pub b11: f64,
    pub b12: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleTwoParams {
    pub modes: usize,
    pub horizon: f64,
    pub regimes: [ExampleTwoCoefficients; 2],
    /// Sine coefficients `a_n` of the first component's initial datum.
    pub initial: Vec<f64>,
}

impl ExampleTwoParams {
    pub fn default_for(modes: usize) -> Self {
        Self {
            modes,
            horizon: 1.0,
            regimes: [
                ExampleTwoCoefficients { a11: 0.5, a12: 0.3, a22: -0.2, b11: 0.2, b12: 0.2 },
                ExampleTwoCoefficients { a11: -0.3, a12: 0.1, a22: 0.4, b11: 0.3, b12: -0.1 },
            ],
            initial: (1..=modes).map(|n| 1.0 / (n * n) as f64).collect(),
        }
    }
}

/// One regime of the heat system: state `(φ₁, φ₂)`, control `(u₁, u₂)`, each block
/// holding `modes` sine coefficients.
#[derive(Debug, Clone)]
pub struct ExampleTwoPack {
    modes: usize,
    coef: ExampleTwoCoefficients,
    /// Block (0 or 1) whose terminal energy is the cost.
    cost_block: usize,
    product: Arc<Vec<f64>>,
}

impl ExampleTwoPack {
    pub fn new(modes: usize, coef: ExampleTwoCoefficients, cost_block: usize) -> Self {
        Self { modes, coef, cost_block, product: Arc::new(sine_product_tensor(modes)) }
    }

    fn square(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        let n = self.modes;
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..n {
            if v[j] == 0.0 {
                continue;
            }
            for k in 0..n {
                let s = v[j] * w[k];
                if s == 0.0 {
                    continue;
                }
                let row = &self.product[(j * n + k) * n..(j * n + k + 1) * n];
                for (o, c) in out.iter_mut().zip(row) {
                    *o += s * c;
                }
            }
        }
    }
}

impl CoefficientPack for ExampleTwoPack {
    fn state_dim(&self) -> usize {
        2 * self.modes
    }
    fn control_dim(&self) -> usize {
        2 * self.modes
    }
    fn drift(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let c = &self.coef;
        for i in 0..n {
            out[i] = c.a11 * x[i] + c.a12 * x[n + i] + u[i];
            out[n + i] = c.a22 * x[n + i];
        }
    }
    fn diffusion(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let c = &self.coef;
        for i in 0..n {
            out[i] = c.b11 * x[i] + c.b12 * x[n + i];
        }
        let u2 = &u[n..];
        self.square(u2, u2, &mut out[n..]);
    }
    fn drift_dx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let d = 2 * n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n {
            out[i * d + i] = self.coef.a11;
            out[i * d + n + i] = self.coef.a12;
            out[(n + i) * d + n + i] = self.coef.a22;
        }
    }
    fn drift_du(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let d = 2 * n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n {
            out[i * d + i] = 1.0;
        }
    }
    fn diffusion_dx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let d = 2 * n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n {
            out[i * d + i] = self.coef.b11;
            out[i * d + n + i] = self.coef.b12;
        }
    }
    fn diffusion_du(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let d = 2 * n;
        out.iter_mut().for_each(|o| *o = 0.0);
        // ∂(u₂²)_m/∂u₂_j = 2 Σ_k c_{jkm} u₂_k
        for j in 0..n {
            for k in 0..n {
                let uk = u[n + k];
                if uk == 0.0 {
                    continue;
                }
                for m in 0..n {
                    out[(n + m) * d + n + j] += 2.0 * self.product[(j * n + k) * n + m] * uk;
                }
            }
        }
    }
    fn sparse_products(&self) -> bool {
        true
    }
    fn drift_dx_apply(&self, _t: f64, _x: &[f64], _u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let c = &self.coef;
        for i in 0..n {
            out[i] = c.a11 * v[i] + c.a12 * v[n + i];
            out[n + i] = c.a22 * v[n + i];
        }
    }
    fn drift_dx_apply_t(&self, _t: f64, _x: &[f64], _u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let c = &self.coef;
        for i in 0..n {
            out[i] = c.a11 * v[i];
            out[n + i] = c.a12 * v[i] + c.a22 * v[n + i];
        }
    }
    fn drift_du_apply(&self, _t: f64, _x: &[f64], _u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.modes;
        out[..n].copy_from_slice(&v[..n]);
        out[n..].iter_mut().for_each(|o| *o = 0.0);
    }
    fn diffusion_dx_apply(&self, _t: f64, _x: &[f64], _u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let c = &self.coef;
        for i in 0..n {
            out[i] = c.b11 * v[i] + c.b12 * v[n + i];
            out[n + i] = 0.0;
        }
    }
    fn diffusion_dx_apply_t(&self, _t: f64, _x: &[f64], _u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let c = &self.coef;
        for i in 0..n {
            out[i] = c.b11 * v[i];
            out[n + i] = c.b12 * v[i];
        }
    }
    fn diffusion_du_apply(&self, _t: f64, _x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.modes;
        out[..n].iter_mut().for_each(|o| *o = 0.0);
        // the product tensor is symmetric in its first two slots
        self.square(&u[n..], &v[n..], &mut out[n..]);
        out[n..].iter_mut().for_each(|o| *o *= 2.0);
    }
    fn drift_dxx(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn drift_dxu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn drift_duu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn diffusion_dxx(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn diffusion_dxu(&self, _: f64, _: &[f64], _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn diffusion_duu(&self, _: f64, _: &[f64], _: &[f64], v: &[f64], w: &[f64], out: &mut [f64]) {
        let n = self.modes;
        out[..n].iter_mut().for_each(|o| *o = 0.0);
        self.square(&v[n..], &w[n..], &mut out[n..]);
        out[n..].iter_mut().for_each(|o| *o *= 2.0);
    }
    fn running_cost(&self, _t: f64, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }
    fn running_cost_dx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn running_cost_du(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn running_cost_dxx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn running_cost_dxu(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn running_cost_duu(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        let n = self.modes;
        let b = &x[self.cost_block * n..(self.cost_block + 1) * n];
        0.5 * b.iter().map(|v| v * v).sum::<f64>()
    }
    fn terminal_cost_dx(&self, x: &[f64], out: &mut [f64]) {
        let n = self.modes;
        out.iter_mut().for_each(|o| *o = 0.0);
        let r = self.cost_block * n..(self.cost_block + 1) * n;
        out[r.clone()].copy_from_slice(&x[r]);
    }
    fn terminal_cost_dxx(&self, _x: &[f64], out: &mut [f64]) {
        let n = self.modes;
        let d = 2 * n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in self.cost_block * n..(self.cost_block + 1) * n {
            out[i * d + i] = 1.0;
        }
    }
    fn structure(&self) -> PackStructure {
        PackStructure {
            affine_in_state: true,
            state_jacobian_control_free: true,
            quadratic_state_costs: true,
        }
    }
}

/// Coupled heat system with `modes` sine modes per component and default coefficients.
pub fn builtin_example_two(modes: usize) -> Result<Scenario> {
    builtin_example_two_with(ExampleTwoParams::default_for(modes))
}

pub fn builtin_example_two_with(params: ExampleTwoParams) -> Result<Scenario> {
    let n = params.modes;
    if n == 0 {
        return Err(Error::InvalidArgument("mode count must be at least 1".into()));
    }
    if params.initial.len() != n {
        return Err(Error::Dimension("initial coefficients must match the mode count".into()));
    }
    let mut eig: Vec<f64> = Vec::with_capacity(2 * n);
    let lap = SemigroupSpec::<f64>::dirichlet_laplacian(n);
    let SemigroupSpec::Diagonal { eigenvalues } = lap else { unreachable!() };
    eig.extend(&eigenvalues);
    eig.extend(&eigenvalues);
    // the block layout is not sorted by eigenvalue, so it goes through the dense kind
    let semigroup = if n == 1 {
        SemigroupSpec::diagonal(eig)?
    } else {
        SemigroupSpec::dense(crate::spaces::HOperator::diagonal(&eig, crate::spaces::SpaceTag::H))?
    };
    let mut initial = vec![0.0; 2 * n];
    initial[..n].copy_from_slice(&params.initial);
    let control_set = ControlSet {
        dim: 2 * n,
        blocks: vec![
            ControlBlock { start: 0, len: n, kind: ControlBlockKind::Free { sampling_radius: 1.0 } },
            ControlBlock { start: n, len: n, kind: ControlBlockKind::Ball { radius: 1.0 } },
        ],
    };
    Ok(Scenario {
        name: "example2".into(),
        spaces: SpaceRegistry::sine_blocks(n, 2),
        semigroup,
        packs: vec![
            Arc::new(ExampleTwoPack::new(n, params.regimes[0], 0)),
            Arc::new(ExampleTwoPack::new(n, params.regimes[1], 1)),
        ],
        uncertainty: UncertaintyModel::discrete(vec!["1".into(), "2".into()]),
        control_set,
        horizon: params.horizon,
        initial_state: initial,
        malliavin_regular: true,
        state_blocks: vec![(0, n), (n, n)],
    })
}

/// Per-mode data of the nulling control `u₁ = f`, `u₂ = 0`:
/// `f_n(t) = −(a_n/T) exp((λ_n + a₁₁ − ½b₁₁²) t + b₁₁ W(t))` with the first regime's
/// coefficients, so `φ₁` of that regime vanishes at `T` pathwise. Returns
/// `(scale_n = −a_n/T, rate_n = λ_n + a₁₁ − ½b₁₁², volatility = b₁₁)`.
pub fn nulling_control_coefficients(params: &ExampleTwoParams) -> (Vec<f64>, Vec<f64>, f64) {
    let c = params.regimes[0];
    let pi = std::f64::consts::PI;
    let scale = params.initial.iter().map(|a| -a / params.horizon).collect();
    let rate = (1..=params.modes)
        .map(|n| -((n as f64) * pi).powi(2) + c.a11 - 0.5 * c.b11 * c.b11)
        .collect();
    (scale, rate, c.b11)
}

#[cfg(test)]
mod tests {
    use super::super::check_derivatives;
    use super::*;
    use crate::spaces::{matvec, matvec_t};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn example_two_products_match_dense_jacobians() {
        let modes = 5;
        let s = builtin_example_two(modes).unwrap();
        let n = 2 * modes;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        for pack in &s.packs {
            let (x, u, v) = (draw(n), draw(n), draw(n));
            let mut jac = vec![0.0; n * n];
            let (mut fast, mut slow) = (vec![0.0; n], vec![0.0; n]);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(a, b)| (a - b).abs() < 1e-12);
            pack.drift_dx(0.3, &x, &u, &mut jac);
            pack.drift_dx_apply(0.3, &x, &u, &v, &mut fast);
            matvec(&jac, n, n, &v, &mut slow);
            assert!(close(&fast, &slow));
            pack.drift_dx_apply_t(0.3, &x, &u, &v, &mut fast);
            matvec_t(&jac, n, n, &v, &mut slow);
            assert!(close(&fast, &slow));
            pack.diffusion_dx(0.3, &x, &u, &mut jac);
            pack.diffusion_dx_apply(0.3, &x, &u, &v, &mut fast);
            matvec(&jac, n, n, &v, &mut slow);
            assert!(close(&fast, &slow));
            pack.diffusion_dx_apply_t(0.3, &x, &u, &v, &mut fast);
            matvec_t(&jac, n, n, &v, &mut slow);
            assert!(close(&fast, &slow));
            pack.drift_du(0.3, &x, &u, &mut jac);
            pack.drift_du_apply(0.3, &x, &u, &v, &mut fast);
            matvec(&jac, n, n, &v, &mut slow);
            assert!(close(&fast, &slow));
            pack.diffusion_du(0.3, &x, &u, &mut jac);
            pack.diffusion_du_apply(0.3, &x, &u, &v, &mut fast);
            matvec(&jac, n, n, &v, &mut slow);
            assert!(close(&fast, &slow), "{fast:?} {slow:?}");
        }
    }

    #[test]
    fn example_one_values() {
        let s = builtin_example_one();
        s.validate().unwrap();
        assert_eq!(s.packs[0].running_cost(0.0, &[0.0], &[1.0]), 0.5);
        let mut o = [0.0];
        s.packs[1].diffusion(0.0, &[0.0], &[1.0], &mut o);
        assert_eq!(o[0], 0.0);
        s.packs[1].drift(0.0, &[0.0], &[0.7], &mut o);
        assert_eq!(o[0], 0.7);
        s.packs[0].terminal_cost_dx(&[0.0], &mut o);
        assert_eq!(o[0], 0.0);
        assert_eq!(s.uncertainty.size(), 2);
        assert_eq!(s.uncertainty.distance(0, 1), 1.0);
        assert!(s.uncertainty.lambda_set.is_full_simplex());
    }

    #[test]
    fn example_one_quartic_coefficient_from_fourth_difference() {
        let p = ExampleOnePack::Quiet;
        let h = 0.05;
        let g = |u: f64| p.running_cost(0.0, &[0.0], &[u]);
        let d4 = (g(2.0 * h) - 4.0 * g(h) + 6.0 * g(0.0) - 4.0 * g(-h) + g(-2.0 * h)) / h.powi(4);
        // g⁽⁴⁾ = 24·c
        assert!((d4 / 24.0 - 0.25).abs() < 1e-6);
    }

    #[test]
    fn derivative_consistency_builtins() {
        for p in builtin_example_one().packs {
            let c = check_derivatives(p.as_ref(), 1.0, 200, 1.0, 3);
            assert!(c.max_rel_error < 1e-5, "{c:?}");
        }
        for p in builtin_example_two(3).unwrap().packs {
            let c = check_derivatives(p.as_ref(), 1.0, 200, 1.0, 4);
            assert!(c.max_rel_error < 1e-5, "{c:?}");
        }
    }

    #[test]
    fn example_two_structure() {
        let s = builtin_example_two(4).unwrap();
        s.validate().unwrap();
        let n = 4;
        let d = 2 * n;
        let x: Vec<f64> = (0..d).map(|i| i as f64 * 0.1 - 0.3).collect();
        let u: Vec<f64> = (0..d).map(|i| 0.05 * i as f64).collect();
        for p in &s.packs {
            let mut j = vec![0.0; d * d];
            p.drift_dx(0.3, &x, &u, &mut j);
            for i in n..d {
                for k in 0..n {
                    assert_eq!(j[i * d + k], 0.0);
                }
            }
            p.diffusion_dx(0.3, &x, &u, &mut j);
            assert!(j[n * d..].iter().all(|v| *v == 0.0));
        }
        assert!(s.initial_state[n..].iter().all(|v| *v == 0.0));
        assert!(builtin_example_two(0).is_err());
    }

    #[test]
    fn control_square_matches_pointwise_product() {
        let n = 6;
        let pack = ExampleTwoPack::new(n, ExampleTwoParams::default_for(n).regimes[0], 0);
        let mut u = vec![0.0; 2 * n];
        u[n] = 0.3; // only the first mode
        let mut out = vec![0.0; 2 * n];
        pack.diffusion(0.0, &vec![0.0; 2 * n], &u, &mut out);
        // (0.3·√2 sin πξ)² = 0.09·(1 − cos 2πξ); sine coefficients from quadrature
        let q = crate::spaces::sine_coefficients(
            |x: f64| 0.09 * (1.0 - (2.0 * std::f64::consts::PI * x).cos()),
            n,
            4000,
        );
        for m in 0..n {
            assert!((out[n + m] - q[m]).abs() < 1e-9);
        }
    }
}
