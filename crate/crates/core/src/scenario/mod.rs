//! Controlled system data: coefficient packs per uncertainty point, the uncertainty
//! model, the control set and heuristic assumption checks.

mod affine;
mod builtin;
mod file;
mod lambda;

use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::{matvec, matvec_t, HVector, SemigroupSpec, SpaceRegistry, SpaceTag};

pub use affine::{AffineBilinearPack, AffineBilinearSpec, CostSpec, FieldSpec};
pub use file::{load_scenario, ScenarioFile, UncertaintySpec, FAMILY_AFFINE, FAMILY_EXAMPLE_ONE, FAMILY_EXAMPLE_TWO};
pub use builtin::{
    builtin_example_one, builtin_example_two, builtin_example_two_with, nulling_control_coefficients,
    ExampleOnePack, ExampleTwoCoefficients, ExampleTwoPack, ExampleTwoParams,
};
pub use lambda::{LambdaConstraint, LambdaSet, LinearOptimum};

/// Structural facts a pack declares about itself; used to pick exact solver paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PackStructure {
    /// `a` and `b` are affine in x (no `∂xx` terms).
    pub affine_in_state: bool,
    /// `∂x a`, `∂x b` do not depend on the control (no `∂xu` terms).
    pub state_jacobian_control_free: bool,
    /// `g` and `h` are at most quadratic in x with constant x-Hessians and no x-u coupling.
    pub quadratic_state_costs: bool,
}

/// Coefficients `a, b, g, h` of one uncertainty point with derivatives up to order two.
///
/// All derivatives are plain coordinate derivatives; conversion to Riesz
/// representatives under the registry weights happens in the solvers. Matrices are
/// row-major: `drift_dx` is `N×N` with entry `(i, j) = ∂a_i/∂x_j`, `drift_du` is `N×N₁`.
/// Second derivatives are returned as bilinear actions on direction pairs.
pub trait CoefficientPack: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn drift_dx(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn drift_du(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion_dx(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion_du(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn drift_dxx(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn drift_dxu(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn drift_duu(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn diffusion_dxx(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn diffusion_dxu(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);
    #[allow(clippy::too_many_arguments)]
    fn diffusion_duu(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], w: &[f64], out: &mut [f64]);

    fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64;
    fn running_cost_dx(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn running_cost_du(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `N×N`.
    fn running_cost_dxx(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `N×N₁`, entry `(i, j) = ∂²g/∂x_i∂u_j`.
    fn running_cost_dxu(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `N₁×N₁`.
    fn running_cost_duu(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);

    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn terminal_cost_dx(&self, x: &[f64], out: &mut [f64]);
    fn terminal_cost_dxx(&self, x: &[f64], out: &mut [f64]);

    fn structure(&self) -> PackStructure {
        PackStructure::default()
    }

    // Jacobian products. The defaults build the full matrix; packs with sparse
    // Jacobians override them because the variation and adjoint sweeps call
    // these once per path and step.

    /// True when the `*_apply` products are cheaper than a dense matrix-vector product.
    fn sparse_products(&self) -> bool {
        false
    }

    /// `∂x a · v`.
    fn drift_dx_apply(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let mut j = vec![0.0; n * n];
        self.drift_dx(t, x, u, &mut j);
        matvec(&j, n, n, v, out);
    }
    /// `∂u a · v`.
    fn drift_du_apply(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let (n, n1) = (self.state_dim(), self.control_dim());
        let mut j = vec![0.0; n * n1];
        self.drift_du(t, x, u, &mut j);
        matvec(&j, n, n1, v, out);
    }
    /// `∂x b · v`.
    fn diffusion_dx_apply(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let mut j = vec![0.0; n * n];
        self.diffusion_dx(t, x, u, &mut j);
        matvec(&j, n, n, v, out);
    }
    /// `∂u b · v`.
    fn diffusion_du_apply(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let (n, n1) = (self.state_dim(), self.control_dim());
        let mut j = vec![0.0; n * n1];
        self.diffusion_du(t, x, u, &mut j);
        matvec(&j, n, n1, v, out);
    }
    /// `(∂x a)ᵀ v` in coordinates.
    fn drift_dx_apply_t(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let mut j = vec![0.0; n * n];
        self.drift_dx(t, x, u, &mut j);
        matvec_t(&j, n, n, v, out);
    }
    /// `(∂x b)ᵀ v` in coordinates.
    fn diffusion_dx_apply_t(&self, t: f64, x: &[f64], u: &[f64], v: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let mut j = vec![0.0; n * n];
        self.diffusion_dx(t, x, u, &mut j);
        matvec_t(&j, n, n, v, out);
    }
}

/// Finite uncertainty support with a metric and an admissible mixture set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyModel {
    pub gammas: Vec<String>,
    /// Row-major `m×m` distances.
    pub distance: Vec<f64>,
    pub lambda_set: LambdaSet,
}

impl UncertaintyModel {
    /// Discrete metric on `m` labelled points with Λ the full simplex.
    pub fn discrete(labels: Vec<String>) -> Self {
        let m = labels.len();
        let distance = (0..m * m).map(|k| if k / m == k % m { 0.0 } else { 1.0 }).collect();
        Self { gammas: labels, distance, lambda_set: LambdaSet::full_simplex() }
    }

    pub fn size(&self) -> usize {
        self.gammas.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distance[i * self.size() + j]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.size();
        if m == 0 {
            return Err(Error::Config("uncertainty set is empty".into()));
        }
        if self.distance.len() != m * m {
            return Err(Error::Config(format!("distance matrix must be {m}x{m}")));
        }
        for i in 0..m {
            if self.distance(i, i) != 0.0 {
                return Err(Error::Config("distance diagonal must be zero".into()));
            }
            for j in 0..m {
                let d = self.distance(i, j);
                if !(d >= 0.0) || d != self.distance(j, i) {
                    return Err(Error::Config("distance must be symmetric and nonnegative".into()));
                }
                if m <= 20 {
                    for k in 0..m {
                        if d > self.distance(i, k) + self.distance(k, j) + 1e-12 {
                            return Err(Error::Config(format!(
                                "triangle inequality fails for ({i}, {k}, {j})"
                            )));
                        }
                    }
                }
            }
        }
        self.lambda_set.check_dims(m)?;
        if !self.lambda_set.is_feasible(m) {
            return Err(Error::Infeasible("Λ is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlBlockKind {
    /// No constraint; `sampling_radius` bounds the probe box in H₁ norm per coordinate.
    Free { sampling_radius: f64 },
    /// Coordinatewise bounds.
    Box { lower: f64, upper: f64 },
    /// Closed ball of the weighted H₁ norm.
    Ball { radius: f64 },
}

/// Serialized as one flat table: `{ start, len, kind = "box", lower, upper }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawControlBlock", into = "RawControlBlock")]
pub struct ControlBlock {
    pub start: usize,
    pub len: usize,
    pub kind: ControlBlockKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControlBlock {
    start: usize,
    len: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sampling_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
}

impl TryFrom<RawControlBlock> for ControlBlock {
    type Error = String;

    fn try_from(r: RawControlBlock) -> std::result::Result<Self, String> {
        let kind = match (r.kind.as_str(), r.sampling_radius, r.lower, r.upper, r.radius) {
            ("free", Some(sampling_radius), None, None, None) => ControlBlockKind::Free { sampling_radius },
            ("box", None, Some(lower), Some(upper), None) => ControlBlockKind::Box { lower, upper },
            ("ball", None, None, None, Some(radius)) => ControlBlockKind::Ball { radius },
            ("free", ..) => return Err("a free block takes exactly `sampling_radius`".into()),
            ("box", ..) => return Err("a box block takes exactly `lower` and `upper`".into()),
            ("ball", ..) => return Err("a ball block takes exactly `radius`".into()),
            (other, ..) => return Err(format!("unknown control block kind `{other}` (free, box, ball)")),
        };
        Ok(Self { start: r.start, len: r.len, kind })
    }
}

impl From<ControlBlock> for RawControlBlock {
    fn from(b: ControlBlock) -> Self {
        let mut r = Self {
            start: b.start,
            len: b.len,
            kind: String::new(),
            sampling_radius: None,
            lower: None,
            upper: None,
            radius: None,
        };
        match b.kind {
            ControlBlockKind::Free { sampling_radius } => {
                r.kind = "free".into();
                r.sampling_radius = Some(sampling_radius);
            }
            ControlBlockKind::Box { lower, upper } => {
                r.kind = "box".into();
                (r.lower, r.upper) = (Some(lower), Some(upper));
            }
            ControlBlockKind::Ball { radius } => {
                r.kind = "ball".into();
                r.radius = Some(radius);
            }
        }
        r
    }
}

/// Convex closed control set `U ⊂ H₁` as a product of coordinate blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSet {
    pub dim: usize,
    pub blocks: Vec<ControlBlock>,
}

impl ControlSet {
    pub fn interval(lower: f64, upper: f64) -> Self {
        Self { dim: 1, blocks: vec![ControlBlock { start: 0, len: 1, kind: ControlBlockKind::Box { lower, upper } }] }
    }

    pub fn unconstrained(dim: usize, sampling_radius: f64) -> Self {
        Self {
            dim,
            blocks: vec![ControlBlock { start: 0, len: dim, kind: ControlBlockKind::Free { sampling_radius } }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.dim];
        for b in &self.blocks {
            if b.start + b.len > self.dim {
                return Err(Error::Config("control block exceeds control dimension".into()));
            }
            for c in &mut covered[b.start..b.start + b.len] {
                if *c {
                    return Err(Error::Config("control blocks overlap".into()));
                }
                *c = true;
            }
            match b.kind {
                ControlBlockKind::Box { lower, upper } if !(lower <= upper) => {
                    return Err(Error::Config("control box has lower > upper".into()))
                }
                ControlBlockKind::Ball { radius } if !(radius >= 0.0) => {
                    return Err(Error::Config("control ball radius must be nonnegative".into()))
                }
                _ => {}
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Config("control blocks must cover every coordinate".into()));
        }
        Ok(())
    }

    /// Projection onto U in the H₁ metric given by `weights`.
    pub fn project(&self, v: &mut [f64], weights: &[f64]) {
        for b in &self.blocks {
            let seg = b.start..b.start + b.len;
            match b.kind {
                ControlBlockKind::Free { .. } => {}
                ControlBlockKind::Box { lower, upper } => {
                    v[seg].iter_mut().for_each(|x| *x = x.clamp(lower, upper));
                }
                ControlBlockKind::Ball { radius } => {
                    let n2: f64 = v[seg.clone()]
                        .iter()
                        .zip(&weights[seg.clone()])
                        .map(|(x, w)| w * w * x * x)
                        .sum();
                    let n = n2.sqrt();
                    if n > radius {
                        let s = radius / n;
                        v[seg].iter_mut().for_each(|x| *x *= s);
                    }
                }
            }
        }
    }

    pub fn contains(&self, v: &[f64], weights: &[f64], tol: f64) -> bool {
        let mut p = v.to_vec();
        self.project(&mut p, weights);
        p.iter().zip(v).all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Half-widths and centres of the coordinate bounding box of U.
    pub fn bounding_box(&self, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0; self.dim];
        let mut hi = vec![0.0; self.dim];
        for b in &self.blocks {
            for i in b.start..b.start + b.len {
                let (l, h) = match b.kind {
                    ControlBlockKind::Free { sampling_radius } => {
                        (-sampling_radius / weights[i], sampling_radius / weights[i])
                    }
                    ControlBlockKind::Box { lower, upper } => (lower, upper),
                    ControlBlockKind::Ball { radius } => (-radius / weights[i], radius / weights[i]),
                };
                lo[i] = l;
                hi[i] = h;
            }
        }
        (lo, hi)
    }

    /// Probe points of U: projected bounding-box vertices plus face midpoints, at most `cap`.
    pub fn probe_points(&self, weights: &[f64], cap: usize, seed: u64) -> Vec<Vec<f64>> {
        let (lo, hi) = self.bounding_box(weights);
        let n = self.dim;
        let mut pts: Vec<Vec<f64>> = Vec::new();
        let push = |mut p: Vec<f64>, pts: &mut Vec<Vec<f64>>| {
            self.project(&mut p, weights);
            if !pts.iter().any(|q| q == &p) {
                pts.push(p);
            }
        };
        let vertex_budget = cap.div_ceil(2).max(1);
        if n < 20 && (1usize << n) <= vertex_budget {
            for mask in 0..(1usize << n) {
                let p = (0..n).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect();
                push(p, &mut pts);
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..vertex_budget {
                let p = (0..n).map(|i| if rng.random::<bool>() { hi[i] } else { lo[i] }).collect();
                push(p, &mut pts);
            }
        }
        let centre: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        for i in 0..n {
            if pts.len() >= cap {
                break;
            }
            for bound in [lo[i], hi[i]] {
                let mut p = centre.clone();
                p[i] = bound;
                push(p, &mut pts);
            }
        }
        if pts.len() < cap {
            push(centre, &mut pts);
        }
        pts.truncate(cap);
        pts
    }
}

/// Full data of the robust control problem.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub spaces: SpaceRegistry<f64>,
    pub semigroup: SemigroupSpec<f64>,
    pub packs: Vec<Arc<dyn CoefficientPack>>,
    pub uncertainty: UncertaintyModel,
    pub control_set: ControlSet,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    /// Malliavin regularity of `S_γ` asserted by construction.
    pub malliavin_regular: bool,
    /// Named component blocks of the state as `(start, len)`, covering `0..N`.
    pub state_blocks: Vec<(usize, usize)>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let n = self.spaces.dim(SpaceTag::H);
        let n1 = self.spaces.dim(SpaceTag::H1);
        if self.semigroup.dim() != n {
            return Err(Error::Dimension("semigroup dimension differs from H".into()));
        }
        if self.initial_state.len() != n {
            return Err(Error::Dimension("initial state dimension differs from H".into()));
        }
        if self.packs.len() != self.uncertainty.size() {
            return Err(Error::Config("one coefficient pack per uncertainty point is required".into()));
        }
        for (i, p) in self.packs.iter().enumerate() {
            if p.state_dim() != n || p.control_dim() != n1 {
                return Err(Error::Dimension(format!("pack {i} dimensions disagree with registry")));
            }
        }
        if self.control_set.dim != n1 {
            return Err(Error::Dimension("control set dimension differs from H1".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let mut next = 0;
        for &(start, len) in &self.state_blocks {
            if start != next || len == 0 {
                return Err(Error::Config("state blocks must tile 0..N in order".into()));
            }
            next += len;
        }
        if next != n {
            return Err(Error::Config("state blocks must cover every coordinate".into()));
        }
        self.control_set.validate()?;
        self.uncertainty.validate()
    }

    pub fn state_dim(&self) -> usize {
        self.spaces.dim(SpaceTag::H)
    }

    pub fn control_dim(&self) -> usize {
        self.spaces.dim(SpaceTag::H1)
    }

    pub fn gamma_count(&self) -> usize {
        self.packs.len()
    }

    pub fn pack(&self, gamma: usize) -> Result<&Arc<dyn CoefficientPack>> {
        self.packs
            .get(gamma)
            .ok_or_else(|| Error::InvalidArgument(format!("no uncertainty point with index {gamma}")))
    }

    pub fn project_control(&self, v: &HVector<f64>) -> Result<HVector<f64>> {
        if v.tag != SpaceTag::H1 || v.len() != self.control_dim() {
            return Err(Error::Dimension("control must be an H1 vector".into()));
        }
        let mut out = v.clone();
        self.control_set.project(&mut out.coords, self.spaces.weights(SpaceTag::H1));
        Ok(out)
    }

    pub fn control_admissible(&self, v: &[f64], tol: f64) -> bool {
        self.control_set.contains(v, self.spaces.weights(SpaceTag::H1), tol)
    }
}

/// Worst relative deviation between supplied derivatives and central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub max_rel_error: f64,
    pub worst: String,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference cross-validation of every derivative of `pack` at `samples`
/// random `(t, x, u)` drawn from `[-radius, radius]`.
pub fn check_derivatives(
    pack: &dyn CoefficientPack,
    horizon: f64,
    samples: usize,
    radius: f64,
    seed: u64,
) -> DerivativeCheck {
    let n = pack.state_dim();
    let n1 = pack.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    let mut note = |e: f64, what: &str| {
        if e > worst.0 {
            worst = (e, what.to_string());
        }
    };
    type VecFn<'a> = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + 'a>;
    for _ in 0..samples {
        let t = rng.random::<f64>() * horizon;
        let x: Vec<f64> = (0..n).map(|_| radius * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let u: Vec<f64> = (0..n1).map(|_| radius * (2.0 * rng.random::<f64>() - 1.0)).collect();
        let dx: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let du: Vec<f64> = (0..n1).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();

        let fields: [(&str, VecFn, VecFn, VecFn); 2] = [
            (
                "drift",
                Box::new(|x: &[f64], u: &[f64], o: &mut [f64]| pack.drift(t, x, u, o)),
                Box::new(|x: &[f64], u: &[f64], o: &mut [f64]| pack.drift_dx(t, x, u, o)),
                Box::new(|x: &[f64], u: &[f64], o: &mut [f64]| pack.drift_du(t, x, u, o)),
            ),
            (
                "diffusion",
                Box::new(|x: &[f64], u: &[f64], o: &mut [f64]| pack.diffusion(t, x, u, o)),
                Box::new(|x: &[f64], u: &[f64], o: &mut [f64]| pack.diffusion_dx(t, x, u, o)),
                Box::new(|x: &[f64], u: &[f64], o: &mut [f64]| pack.diffusion_du(t, x, u, o)),
            ),
        ];
        for (idx, (name, f, fx, fu)) in fields.iter().enumerate() {
            let mut jx = vec![0.0; n * n];
            let mut ju = vec![0.0; n * n1];
            fx(&x, &u, &mut jx);
            fu(&x, &u, &mut ju);
            let dir_fd = |xp: &[f64], up: &[f64], xm: &[f64], um: &[f64]| {
                let mut a = vec![0.0; n];
                let mut b = vec![0.0; n];
                f(xp, up, &mut a);
                f(xm, um, &mut b);
                a.iter().zip(&b).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>()
            };
            let shift = |v: &[f64], d: &[f64], s: f64| v.iter().zip(d).map(|(a, b)| a + s * b).collect::<Vec<_>>();
            // first derivatives along random directions
            let fd = dir_fd(&shift(&x, &dx, h), &u, &shift(&x, &dx, -h), &u);
            let mut an = vec![0.0; n];
            crate::spaces::matvec(&jx, n, n, &dx, &mut an);
            for i in 0..n {
                note(rel_err(fd[i], an[i]), &format!("{name}_dx"));
            }
            let fd = dir_fd(&x, &shift(&u, &du, h), &x, &shift(&u, &du, -h));
            crate::spaces::matvec(&ju, n, n1, &du, &mut an);
            for i in 0..n {
                note(rel_err(fd[i], an[i]), &format!("{name}_du"));
            }
            // second derivatives from differences of the Jacobian actions
            let jac_dir = |xx: &[f64], uu: &[f64], wrt_x: bool, d: &[f64]| {
                let mut o = vec![0.0; n];
                if wrt_x {
                    let mut j = vec![0.0; n * n];
                    fx(xx, uu, &mut j);
                    crate::spaces::matvec(&j, n, n, d, &mut o);
                } else {
                    let mut j = vec![0.0; n * n1];
                    fu(xx, uu, &mut j);
                    crate::spaces::matvec(&j, n, n1, d, &mut o);
                }
                o
            };
            let second = |kind: &str, v: &[f64], w: &[f64], o: &mut [f64]| match (idx, kind) {
                (0, "xx") => pack.drift_dxx(t, &x, &u, v, w, o),
                (0, "xu") => pack.drift_dxu(t, &x, &u, v, w, o),
                (0, _) => pack.drift_duu(t, &x, &u, v, w, o),
                (_, "xx") => pack.diffusion_dxx(t, &x, &u, v, w, o),
                (_, "xu") => pack.diffusion_dxu(t, &x, &u, v, w, o),
                (_, _) => pack.diffusion_duu(t, &x, &u, v, w, o),
            };
            let mut o = vec![0.0; n];
            // ∂xx(dx, dx): difference of ∂x·dx along dx
            let a = jac_dir(&shift(&x, &dx, h), &u, true, &dx);
            let b = jac_dir(&shift(&x, &dx, -h), &u, true, &dx);
            second("xx", &dx, &dx, &mut o);
            for i in 0..n {
                note(rel_err((a[i] - b[i]) / (2.0 * h), o[i]), &format!("{name}_dxx"));
            }
            // ∂xu(dx, du): difference of ∂x·dx along du
            let a = jac_dir(&x, &shift(&u, &du, h), true, &dx);
            let b = jac_dir(&x, &shift(&u, &du, -h), true, &dx);
            second("xu", &dx, &du, &mut o);
            for i in 0..n {
                note(rel_err((a[i] - b[i]) / (2.0 * h), o[i]), &format!("{name}_dxu"));
            }
            let a = jac_dir(&x, &shift(&u, &du, h), false, &du);
            let b = jac_dir(&x, &shift(&u, &du, -h), false, &du);
            second("uu", &du, &du, &mut o);
            for i in 0..n {
                note(rel_err((a[i] - b[i]) / (2.0 * h), o[i]), &format!("{name}_duu"));
            }
        }

        // running cost
        let shift = |v: &[f64], d: &[f64], s: f64| v.iter().zip(d).map(|(a, b)| a + s * b).collect::<Vec<_>>();
        let mut gx = vec![0.0; n];
        let mut gu = vec![0.0; n1];
        pack.running_cost_dx(t, &x, &u, &mut gx);
        pack.running_cost_du(t, &x, &u, &mut gu);
        let fd = (pack.running_cost(t, &shift(&x, &dx, h), &u) - pack.running_cost(t, &shift(&x, &dx, -h), &u)) / (2.0 * h);
        note(rel_err(fd, crate::spaces::dot(&gx, &dx)), "running_cost_dx");
        let fd = (pack.running_cost(t, &x, &shift(&u, &du, h)) - pack.running_cost(t, &x, &shift(&u, &du, -h))) / (2.0 * h);
        note(rel_err(fd, crate::spaces::dot(&gu, &du)), "running_cost_du");
        let grad_x = |xx: &[f64], uu: &[f64]| {
            let mut o = vec![0.0; n];
            pack.running_cost_dx(t, xx, uu, &mut o);
            o
        };
        let grad_u = |xx: &[f64], uu: &[f64]| {
            let mut o = vec![0.0; n1];
            pack.running_cost_du(t, xx, uu, &mut o);
            o
        };
        let mut hxx = vec![0.0; n * n];
        let mut hxu = vec![0.0; n * n1];
        let mut huu = vec![0.0; n1 * n1];
        pack.running_cost_dxx(t, &x, &u, &mut hxx);
        pack.running_cost_dxu(t, &x, &u, &mut hxu);
        pack.running_cost_duu(t, &x, &u, &mut huu);
        let (a, b) = (grad_x(&shift(&x, &dx, h), &u), grad_x(&shift(&x, &dx, -h), &u));
        let mut an = vec![0.0; n];
        crate::spaces::matvec(&hxx, n, n, &dx, &mut an);
        for i in 0..n {
            note(rel_err((a[i] - b[i]) / (2.0 * h), an[i]), "running_cost_dxx");
        }
        let (a, b) = (grad_x(&x, &shift(&u, &du, h)), grad_x(&x, &shift(&u, &du, -h)));
        crate::spaces::matvec(&hxu, n, n1, &du, &mut an);
        for i in 0..n {
            note(rel_err((a[i] - b[i]) / (2.0 * h), an[i]), "running_cost_dxu");
        }
        let (a, b) = (grad_u(&x, &shift(&u, &du, h)), grad_u(&x, &shift(&u, &du, -h)));
        let mut an1 = vec![0.0; n1];
        crate::spaces::matvec(&huu, n1, n1, &du, &mut an1);
        for i in 0..n1 {
            note(rel_err((a[i] - b[i]) / (2.0 * h), an1[i]), "running_cost_duu");
        }

        // terminal cost
        let mut hx = vec![0.0; n];
        pack.terminal_cost_dx(&x, &mut hx);
        let fd = (pack.terminal_cost(&shift(&x, &dx, h)) - pack.terminal_cost(&shift(&x, &dx, -h))) / (2.0 * h);
        note(rel_err(fd, crate::spaces::dot(&hx, &dx)), "terminal_cost_dx");
        let mut th = vec![0.0; n * n];
        pack.terminal_cost_dxx(&x, &mut th);
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        pack.terminal_cost_dx(&shift(&x, &dx, h), &mut a);
        pack.terminal_cost_dx(&shift(&x, &dx, -h), &mut b);
        crate::spaces::matvec(&th, n, n, &dx, &mut an);
        for i in 0..n {
            note(rel_err((a[i] - b[i]) / (2.0 * h), an[i]), "terminal_cost_dxx");
        }
    }
    DerivativeCheck { max_rel_error: worst.0, worst: worst.1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

/// Heuristic spot-check of the standing assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Per γ: Lipschitz estimates of `a` and `b` on the base sampling box.
    pub lipschitz_drift: Vec<f64>,
    pub lipschitz_diffusion: Vec<f64>,
    /// Same estimates on the box scaled by 10.
    pub lipschitz_drift_wide: Vec<f64>,
    pub lipschitz_diffusion_wide: Vec<f64>,
    /// Largest `|a|+|b|` over `1+|x|+|u|`.
    pub growth: Vec<f64>,
    /// Largest Frobenius norm of first derivatives of `a`, `b` on the wide box.
    pub derivative_bound: Vec<f64>,
    /// Largest ratio of cost gradients to `1+|x|+|u|`.
    pub cost_gradient_growth: Vec<f64>,
    /// Largest `|a_γ−a_γ'|+|b_γ−b_γ'|` over `(1+|x|+|u|) d(γ,γ')`, absent when m = 1.
    pub gamma_modulus: Option<f64>,
    pub a1: Verdict,
    pub a2_a3: Verdict,
    pub a4: Verdict,
    pub verdict: Verdict,
    /// Always set: the checks are sampled, not proven.
    pub heuristic: bool,
}

/// Monte Carlo spot-check of Lipschitz, growth and γ-continuity bounds.
pub fn validate_assumptions(s: &Scenario, samples: usize, seed: u64) -> Result<AssumptionReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    let n = s.state_dim();
    let n1 = s.control_dim();
    let wh = s.spaces.weights(SpaceTag::H).to_vec();
    let w1 = s.spaces.weights(SpaceTag::H1).to_vec();
    let (lo, hi) = s.control_set.bounding_box(&w1);
    let norm = |v: &[f64], w: &[f64]| v.iter().zip(w).map(|(a, b)| a * a * b * b).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_u = |rng: &mut ChaCha8Rng| {
        let mut u: Vec<f64> = (0..n1).map(|i| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>()).collect();
        s.control_set.project(&mut u, &w1);
        u
    };
    let m = s.gamma_count();
    let mut lip_a = vec![[0.0f64; 2]; m];
    let mut lip_b = vec![[0.0f64; 2]; m];
    let mut growth = vec![0.0f64; m];
    let mut dbound = vec![0.0f64; m];
    let mut cgrowth = vec![0.0f64; m];
    let mut modulus: Option<f64> = None;
    let mut bufs = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (scale_idx, radius) in [1.0f64, 10.0].into_iter().enumerate() {
        for k in 0..samples {
            let t = rng.random::<f64>() * s.horizon;
            let x: Vec<f64> = (0..n).map(|i| radius * (2.0 * rng.random::<f64>() - 1.0) / wh[i]).collect();
            let u = draw_u(&mut rng);
            let mut x2: Vec<f64> = (0..n).map(|i| radius * (2.0 * rng.random::<f64>() - 1.0) / wh[i]).collect();
            let mut u2 = draw_u(&mut rng);
            // axis-aligned pairs isolate the state and control slopes
            match k % 3 {
                0 => x2.clone_from(&x),
                1 => u2.clone_from(&u),
                _ => {}
            }
            let dxn = norm(&x.iter().zip(&x2).map(|(a, b)| a - b).collect::<Vec<_>>(), &wh);
            let dun = norm(&u.iter().zip(&u2).map(|(a, b)| a - b).collect::<Vec<_>>(), &w1);
            let denom = dxn + dun;
            for g in 0..m {
                let p = &s.packs[g];
                p.drift(t, &x, &u, &mut bufs.0);
                p.drift(t, &x2, &u2, &mut bufs.1);
                p.diffusion(t, &x, &u, &mut bufs.2);
                p.diffusion(t, &x2, &u2, &mut bufs.3);
                if denom > 1e-12 {
                    let da = norm(&bufs.0.iter().zip(&bufs.1).map(|(a, b)| a - b).collect::<Vec<_>>(), &wh);
                    let db = norm(&bufs.2.iter().zip(&bufs.3).map(|(a, b)| a - b).collect::<Vec<_>>(), &wh);
                    lip_a[g][scale_idx] = lip_a[g][scale_idx].max(da / denom);
                    lip_b[g][scale_idx] = lip_b[g][scale_idx].max(db / denom);
                }
                let size = 1.0 + norm(&x, &wh) + norm(&u, &w1);
                growth[g] = growth[g].max((norm(&bufs.0, &wh) + norm(&bufs.2, &wh)) / size);
                let mut j = vec![0.0; n * n];
                let mut ju = vec![0.0; n * n1];
                let mut fro = 0.0f64;
                p.drift_dx(t, &x, &u, &mut j);
                fro = fro.max(j.iter().map(|v| v * v).sum::<f64>().sqrt());
                p.diffusion_dx(t, &x, &u, &mut j);
                fro = fro.max(j.iter().map(|v| v * v).sum::<f64>().sqrt());
                p.drift_du(t, &x, &u, &mut ju);
                fro = fro.max(ju.iter().map(|v| v * v).sum::<f64>().sqrt());
                p.diffusion_du(t, &x, &u, &mut ju);
                fro = fro.max(ju.iter().map(|v| v * v).sum::<f64>().sqrt());
                dbound[g] = dbound[g].max(fro);
                let mut gx = vec![0.0; n];
                let mut gu = vec![0.0; n1];
                p.running_cost_dx(t, &x, &u, &mut gx);
                p.running_cost_du(t, &x, &u, &mut gu);
                let mut hx = vec![0.0; n];
                p.terminal_cost_dx(&x, &mut hx);
                let gn = gx.iter().chain(&gu).chain(&hx).map(|v| v * v).sum::<f64>().sqrt();
                cgrowth[g] = cgrowth[g].max(gn / size);
                for g2 in g + 1..m {
                    let d = s.uncertainty.distance(g, g2);
                    if d <= 0.0 {
                        continue;
                    }
                    let q = &s.packs[g2];
                    q.drift(t, &x, &u, &mut bufs.1);
                    q.diffusion(t, &x, &u, &mut bufs.3);
                    let da = norm(&bufs.0.iter().zip(&bufs.1).map(|(a, b)| a - b).collect::<Vec<_>>(), &wh);
                    let db = norm(&bufs.2.iter().zip(&bufs.3).map(|(a, b)| a - b).collect::<Vec<_>>(), &wh);
                    let r = (da + db) / (size * d);
                    modulus = Some(modulus.map_or(r, |m: f64| m.max(r)));
                }
            }
        }
    }
    let grows = |pair: [f64; 2]| pair[1] > 2.0 * pair[0] + 1e-12;
    let a1 = if lip_a.iter().chain(&lip_b).any(|p| grows(*p) || !p[1].is_finite()) {
        Verdict::Fail
    } else {
        Verdict::Pass
    };
    let a2_a3 = if growth.iter().chain(&dbound).chain(&cgrowth).all(|v| v.is_finite()) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let a4 = if modulus.is_none_or(f64::is_finite) { Verdict::Pass } else { Verdict::Fail };
    let verdict = if [a1, a2_a3, a4].contains(&Verdict::Fail) { Verdict::Fail } else { Verdict::Pass };
    Ok(AssumptionReport {
        lipschitz_drift: lip_a.iter().map(|p| p[0]).collect(),
        lipschitz_diffusion: lip_b.iter().map(|p| p[0]).collect(),
        lipschitz_drift_wide: lip_a.iter().map(|p| p[1]).collect(),
        lipschitz_diffusion_wide: lip_b.iter().map(|p| p[1]).collect(),
        growth,
        derivative_bound: dbound,
        cost_gradient_growth: cgrowth,
        gamma_modulus: modulus,
        a1,
        a2_a3,
        a4,
        verdict,
        heuristic: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_one_projection() {
        let s = builtin_example_one();
        let p = |v: f64| s.project_control(&HVector::new(vec![v], SpaceTag::H1)).unwrap().coords[0];
        assert_eq!(p(0.5), 0.5);
        assert_eq!(p(3.0), 1.0);
        assert_eq!(p(-2.0), -1.0);
    }

    #[test]
    fn discrete_metric_validates() {
        let u = UncertaintyModel::discrete(vec!["1".into(), "2".into(), "3".into()]);
        u.validate().unwrap();
        assert_eq!(u.distance(0, 2), 1.0);
    }

    #[test]
    fn triangle_violation_rejected() {
        let mut u = UncertaintyModel::discrete(vec!["a".into(), "b".into(), "c".into()]);
        u.distance = vec![0.0, 1.0, 5.0, 1.0, 0.0, 1.0, 5.0, 1.0, 0.0];
        assert!(matches!(u.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ball_projection_and_probe_points() {
        let cs = ControlSet {
            dim: 2,
            blocks: vec![ControlBlock { start: 0, len: 2, kind: ControlBlockKind::Ball { radius: 1.0 } }],
        };
        let w = [1.0, 2.0];
        let mut v = vec![3.0, 4.0];
        cs.project(&mut v, &w);
        let n: f64 = v.iter().zip(&w).map(|(a, b)| a * a * b * b).sum();
        assert!((n - 1.0).abs() < 1e-12);
        let pts = cs.probe_points(&w, 32, 1);
        assert!(pts.iter().all(|p| cs.contains(p, &w, 1e-12)));
        assert!(pts.len() <= 32);
    }

    #[test]
    fn interval_probe_points() {
        let cs = ControlSet::interval(-1.0, 1.0);
        let pts = cs.probe_points(&[1.0], 32, 0);
        assert_eq!(pts, vec![vec![-1.0], vec![1.0], vec![0.0]]);
    }
}
