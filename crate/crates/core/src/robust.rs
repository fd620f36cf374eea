//! Per-regime costs, the worst-case mixture cost over Λ, and the classical
//! singularity test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointFirst, AdjointSecond};
use crate::error::{Error, Result};
use crate::forward::{simulate_state, ControlProcess, StateEnsemble};
use crate::paths::{BrownianBundle, Estimate, TimeGrid};
use crate::scenario::{LambdaSet, Scenario};
use crate::spaces::{matvec, weighted_dot, SpaceTag};

/// Multiple of the largest per-regime standard error used as the argmax tolerance.
pub const ARGMAX_STD_FACTOR: f64 = 3.0;
/// Default residual tolerance of the singularity test.
pub const SINGULAR_TOLERANCE: f64 = 1e-2;
/// Paths inspected by the singularity test.
pub const SINGULAR_PATH_CAP: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCost {
    pub gamma: usize,
    pub label: String,
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
    /// Standard error of `total`.
    pub mc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub per_gamma: Vec<GammaCost>,
    pub paths: usize,
    pub seed: u64,
}

impl CostBreakdown {
    pub fn totals(&self) -> Vec<f64> {
        self.per_gamma.iter().map(|c| c.total).collect()
    }

    pub fn max_std(&self) -> f64 {
        self.per_gamma.iter().map(|c| c.mc_std).fold(0.0, f64::max)
    }
}

/// Cost of an already simulated state: left-endpoint running integral plus terminal cost.
pub fn cost_of_state(s: &Scenario, xbar: &StateEnsemble) -> Result<GammaCost> {
    let pack = s.pack(xbar.gamma)?;
    let grid = xbar.grid;
    let (m, dt) = (grid.steps(), grid.dt());
    let rows: Vec<(f64, f64)> = (0..xbar.x.paths())
        .into_par_iter()
        .map(|p| {
            let run: f64 =
                (0..m).map(|k| pack.running_cost(grid.node(k), xbar.x.at(p, k), xbar.control.at(p, k))).sum();
            (run * dt, pack.terminal_cost(xbar.x.at(p, m)))
        })
        .collect();
    let paths = rows.len() as f64;
    let running = rows.iter().map(|r| r.0).sum::<f64>() / paths;
    let terminal = rows.iter().map(|r| r.1).sum::<f64>() / paths;
    let totals: Vec<f64> = rows.iter().map(|r| r.0 + r.1).collect();
    let est = Estimate::from_samples(&totals);
    Ok(GammaCost {
        gamma: xbar.gamma,
        label: s.uncertainty.gammas[xbar.gamma].clone(),
        running,
        terminal,
        total: running + terminal,
        mc_std: est.std_err,
    })
}

/// Rejects controls whose realized values leave U.
pub fn check_admissible(s: &Scenario, xbar: &StateEnsemble) -> Result<()> {
    let w = s.spaces.weights(SpaceTag::H1);
    let c = &xbar.control;
    for p in 0..c.paths() {
        for k in 0..c.steps() {
            if !s.control_set.contains(c.at(p, k), w, 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "control leaves U on path {p} at step {k}: {:?}",
                    c.at(p, k)
                )));
            }
        }
    }
    Ok(())
}

/// `J(u; γ)` by simulation.
pub fn cost(s: &Scenario, gamma: usize, u: &ControlProcess, grid: &TimeGrid, bundle: &BrownianBundle) -> Result<GammaCost> {
    let x = simulate_state(s, gamma, u, grid, bundle)?;
    check_admissible(s, &x)?;
    cost_of_state(s, &x)
}

/// `J(u; γ)` for every regime on a shared bundle.
pub fn cost_breakdown(s: &Scenario, u: &ControlProcess, grid: &TimeGrid, bundle: &BrownianBundle) -> Result<CostBreakdown> {
    let per_gamma = (0..s.gamma_count()).map(|g| cost(s, g, u, grid, bundle)).collect::<Result<_>>()?;
    Ok(CostBreakdown { per_gamma, paths: bundle.paths(), seed: bundle.seed() })
}

/// Vertices of Λ attaining the maximum up to `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgmaxFace {
    pub vertices: Vec<Vec<f64>>,
    pub tolerance: f64,
    /// False when vertex enumeration was not possible and only `λ*` is listed.
    pub enumerated: bool,
}

impl ArgmaxFace {
    /// Face vertices plus their centroid when the face is not a single point.
    pub fn samples(&self) -> Vec<Vec<f64>> {
        let mut out = self.vertices.clone();
        if self.vertices.len() > 1 {
            let m = self.vertices[0].len();
            let c = (0..m)
                .map(|i| self.vertices.iter().map(|v| v[i]).sum::<f64>() / self.vertices.len() as f64)
                .collect();
            out.push(c);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCost {
    pub value: f64,
    pub lambda_star: Vec<f64>,
    pub argmax: ArgmaxFace,
    /// `|LP value − vertex maximum|`, when vertices were enumerated.
    pub vertex_gap: Option<f64>,
}

/// Worst-case mixture of fixed per-regime costs over Λ.
pub fn robust_from_costs(set: &LambdaSet, costs: &[f64], tolerance: f64) -> Result<RobustCost> {
    if costs.is_empty() {
        return Err(Error::InvalidArgument("no regime costs".into()));
    }
    let lp = set.maximize(costs)?;
    let verts = match set.vertices(costs.len()) {
        Ok(v) => Some(v),
        Err(Error::Unsupported(_)) => None,
        Err(e) => return Err(e),
    };
    let dot = |l: &[f64]| costs.iter().zip(l).map(|(c, l)| c * l).sum::<f64>();
    let (lambda_star, vertex_gap, argmax) = match verts {
        Some(verts) => {
            let best = verts.iter().map(|v| dot(v)).fold(f64::NEG_INFINITY, f64::max);
            let face: Vec<Vec<f64>> = verts.iter().filter(|v| dot(v) >= best - tolerance).cloned().collect();
            // report a vertex maximizer so λ* is exact; the LP solution is the cross-check
            let star = verts.iter().find(|v| dot(v) == best).cloned().unwrap_or(lp.lambda.clone());
            (star, Some((lp.value - best).abs()), ArgmaxFace { vertices: face, tolerance, enumerated: true })
        }
        None => {
            let face = ArgmaxFace { vertices: vec![lp.lambda.clone()], tolerance, enumerated: false };
            (lp.lambda.clone(), None, face)
        }
    };
    Ok(RobustCost { value: dot(&lambda_star), lambda_star, argmax, vertex_gap })
}

/// `J(u) = sup_Λ J(u; λ)` with argmax tolerance `3 × max std_err`.
pub fn robust_cost(
    s: &Scenario,
    u: &ControlProcess,
    grid: &TimeGrid,
    bundle: &BrownianBundle,
) -> Result<(CostBreakdown, RobustCost)> {
    let costs = cost_breakdown(s, u, grid, bundle)?;
    let r = robust_from_costs(&s.uncertainty.lambda_set, &costs.totals(), ARGMAX_STD_FACTOR * costs.max_std())?;
    Ok((costs, r))
}

/// Reference trajectory and adjoints of one regime.
#[derive(Debug, Clone)]
pub struct GammaReference {
    pub state: StateEnsemble,
    pub first: AdjointFirst,
    pub second: AdjointSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularityVerdict {
    Singular,
    Nonsingular,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub first_order_residual: f64,
    pub classical_second_order_residual: f64,
    pub tested_directions: usize,
    pub tested_measures: usize,
    pub tested_paths: usize,
    pub verdict: SingularityVerdict,
    pub tolerance: f64,
}

/// First and second order Hamiltonian increments along `d = v − ū` at one point:
/// `∂u H · d` and `∂uu H(d, d) + ⟨P D d, D d⟩_H`.
struct HamiltonianProbe {
    n: usize,
    n1: usize,
    ju: Vec<f64>,
    ku: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
    bd: Vec<f64>,
    dd: Vec<f64>,
    pd: Vec<f64>,
    tmp: Vec<f64>,
}

impl HamiltonianProbe {
    fn new(n: usize, n1: usize) -> Self {
        Self {
            n,
            n1,
            ju: vec![0.0; n * n1],
            ku: vec![0.0; n * n1],
            grad: vec![0.0; n1],
            hess: vec![0.0; n1 * n1],
            bd: vec![0.0; n],
            dd: vec![0.0; n],
            pd: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval(
        &mut self,
        r: &GammaReference,
        s: &Scenario,
        path: usize,
        k: usize,
        d: &[f64],
        w: &[f64],
    ) -> Result<(f64, f64)> {
        let (n, n1) = (self.n, self.n1);
        let pack = s.pack(r.state.gamma)?;
        let t = r.state.grid.node(k);
        let (x, u) = (r.state.x.at(path, k), r.state.control.at(path, k));
        let (p, q) = (r.first.p.at(path, k), r.first.q.at(path, k));
        pack.drift_du(t, x, u, &mut self.ju);
        pack.diffusion_du(t, x, u, &mut self.ku);
        pack.running_cost_du(t, x, u, &mut self.grad);
        matvec(&self.ju, n, n1, d, &mut self.bd);
        matvec(&self.ku, n, n1, d, &mut self.dd);
        let gd: f64 = self.grad.iter().zip(d).map(|(a, b)| a * b).sum();
        let first = weighted_dot(w, p, &self.bd) + weighted_dot(w, q, &self.dd) - gd;
        pack.drift_duu(t, x, u, d, d, &mut self.tmp);
        let mut second = weighted_dot(w, p, &self.tmp);
        pack.diffusion_duu(t, x, u, d, d, &mut self.tmp);
        second += weighted_dot(w, q, &self.tmp);
        pack.running_cost_duu(t, x, u, &mut self.hess);
        let mut gdd = 0.0;
        for i in 0..n1 {
            for j in 0..n1 {
                gdd += d[i] * self.hess[i * n1 + j] * d[j];
            }
        }
        second -= gdd;
        matvec(r.second.p.at(path, k), n, n, &self.dd, &mut self.pd);
        second += weighted_dot(w, &self.pd, &self.dd);
        Ok((first, second))
    }
}

/// Random points of U: uniform in the bounding box, projected.
pub fn sample_control_points(s: &Scenario, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let w = s.spaces.weights(SpaceTag::H1);
    let (lo, hi) = s.control_set.bounding_box(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut v: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| if h > l { rng.random_range(*l..=*h) } else { *l }).collect();
            s.control_set.project(&mut v, w);
            v
        })
        .collect()
}

/// Points of `U` probed by the singularity test: half structured, half random.
pub fn singularity_points(s: &Scenario, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut points = s.control_set.probe_points(s.spaces.weights(SpaceTag::H1), count.div_ceil(2), seed);
    points.extend(sample_control_points(s, count.saturating_sub(points.len()), seed ^ 0x5eed));
    points.truncate(count.max(1));
    points
}

/// Hamiltonian increments of one regime, laid out `[path][step][point]`.
#[derive(Debug, Clone)]
pub struct HamiltonianSamples {
    pub gamma: usize,
    pub paths: usize,
    pub steps: usize,
    pub points: usize,
    values: Vec<(f64, f64)>,
}

impl HamiltonianSamples {
    fn get(&self, path: usize, k: usize, point: usize) -> (f64, f64) {
        self.values[(path * self.steps + k) * self.points + point]
    }
}

/// Evaluates `∂u H · d` and the classical second order term on the first
/// [`SINGULAR_PATH_CAP`] paths of one regime.
pub fn hamiltonian_samples(s: &Scenario, r: &GammaReference, points: &[Vec<f64>]) -> Result<HamiltonianSamples> {
    let (n, n1) = (s.state_dim(), s.control_dim());
    if points.is_empty() || points.iter().any(|v| v.len() != n1) {
        return Err(Error::InvalidArgument("control points missing or of the wrong length".into()));
    }
    let grid = r.state.grid;
    let steps = grid.steps();
    let paths = r.state.x.paths().min(SINGULAR_PATH_CAP);
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let per_path: Vec<Vec<(f64, f64)>> = (0..paths)
        .into_par_iter()
        .map(|path| -> Result<Vec<(f64, f64)>> {
            let mut probe = HamiltonianProbe::new(n, n1);
            let mut d = vec![0.0; n1];
            let mut out = Vec::with_capacity(steps * points.len());
            for k in 0..steps {
                let ubar = r.state.control.at(path, k);
                for v in points {
                    d.iter_mut().zip(v.iter().zip(ubar)).for_each(|(d, (v, u))| *d = v - u);
                    out.push(probe.eval(r, s, path, k, &d, &w)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(HamiltonianSamples { gamma: r.state.gamma, paths, steps, points: points.len(), values: per_path.concat() })
}

/// Combines per-regime samples into the sup over paths, times, points and `λ`.
pub fn singularity_from_samples(
    s: &Scenario,
    samples: &[HamiltonianSamples],
    lambdas: &[Vec<f64>],
    tolerance: f64,
) -> Result<SingularityReport> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no measures from the argmax face to test".into()));
    }
    let m = s.gamma_count();
    if samples.len() != m || samples.iter().enumerate().any(|(g, h)| h.gamma != g) {
        return Err(Error::InvalidArgument("one sample set per regime, in order, is required".into()));
    }
    let (paths, steps, points) = (samples[0].paths, samples[0].steps, samples[0].points);
    if samples.iter().any(|h| (h.paths, h.steps, h.points) != (paths, steps, points)) {
        return Err(Error::Dimension("regime samples differ in shape".into()));
    }
    if lambdas.iter().any(|l| l.len() != m || !s.uncertainty.lambda_set.contains(l, 1e-9)) {
        return Err(Error::InvalidArgument("tested measure lies outside Λ".into()));
    }
    let (mut r1, mut r2) = (0.0f64, 0.0f64);
    for path in 0..paths {
        for k in 0..steps {
            for v in 0..points {
                for l in lambdas {
                    let (mut f, mut sec) = (0.0, 0.0);
                    for (lg, h) in l.iter().zip(samples) {
                        let (a, b) = h.get(path, k, v);
                        f += lg * a;
                        sec += lg * b;
                    }
                    r1 = r1.max(f.abs());
                    r2 = r2.max(sec.abs());
                }
            }
        }
    }
    let worst = r1.max(r2);
    let verdict = if worst < tolerance {
        SingularityVerdict::Singular
    } else if worst > 10.0 * tolerance {
        SingularityVerdict::Nonsingular
    } else {
        SingularityVerdict::Inconclusive
    };
    Ok(SingularityReport {
        first_order_residual: r1,
        classical_second_order_residual: r2,
        tested_directions: points,
        tested_measures: lambdas.len(),
        tested_paths: paths,
        verdict,
        tolerance,
    })
}

/// Sampled sup over paths, grid times, `v ∈ U` and `λ` of the first and classical
/// second order Hamiltonian conditions. `refs[γ]` must hold regime `γ`.
pub fn check_singular(
    s: &Scenario,
    refs: &[GammaReference],
    lambdas: &[Vec<f64>],
    directions: usize,
    seed: u64,
    tolerance: f64,
) -> Result<SingularityReport> {
    if refs.len() != s.gamma_count() || refs.iter().enumerate().any(|(g, r)| r.state.gamma != g) {
        return Err(Error::InvalidArgument("one reference per regime, in order, is required".into()));
    }
    let points = singularity_points(s, directions, seed);
    let samples = refs.iter().map(|r| hamiltonian_samples(s, r, &points)).collect::<Result<Vec<_>>>()?;
    singularity_from_samples(s, &samples, lambdas, tolerance)
}

/// Serialized summary of the robust stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub costs: CostBreakdown,
    pub robust: RobustCost,
    pub singularity: Option<SingularityReport>,
    pub seeds: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointOptions};
    use crate::scenario::{builtin_example_one, LambdaConstraint};

    fn grid_bundle(paths: usize) -> (TimeGrid, BrownianBundle) {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = BrownianBundle::generate(g, paths, 21).unwrap();
        (g, b)
    }

    #[test]
    fn example_one_costs() {
        let s = builtin_example_one();
        let (g, b) = grid_bundle(20_000);
        let zero = cost_breakdown(&s, &ControlProcess::zero(1), &g, &b).unwrap();
        assert!(zero.totals().iter().all(|c| *c == 0.0));
        let one = cost_breakdown(&s, &ControlProcess::constant(vec![1.0]), &g, &b).unwrap();
        let c = &one.per_gamma;
        assert!((c[0].total + 0.5).abs() < 3.0 * c[0].mc_std + 1e-3, "{c:?}");
        assert!((c[1].total + 0.25).abs() < 1e-12);
        assert!(c[1].mc_std < 1e-15);
        for c in c {
            assert_eq!(c.total, c.running + c.terminal);
        }
    }

    #[test]
    fn lp_matches_vertices_and_face() {
        let set = LambdaSet::full_simplex();
        let r = robust_from_costs(&set, &[-0.5, -0.25], 0.0).unwrap();
        assert_eq!(r.value, -0.25);
        assert_eq!(r.lambda_star, vec![0.0, 1.0]);
        assert_eq!(r.vertex_gap, Some(0.0));
        let tie = robust_from_costs(&set, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(tie.argmax.vertices.len(), 2);
        assert_eq!(tie.argmax.samples().len(), 3);
        let single = robust_from_costs(&set, &[1.7], 0.0).unwrap();
        assert_eq!((single.value, single.lambda_star.clone()), (1.7, vec![1.0]));
        let capped = LambdaSet { constraints: vec![LambdaConstraint { row: vec![0.0, 1.0], bound: 0.5 }] };
        let r = robust_from_costs(&capped, &[-0.5, -0.25], 0.0).unwrap();
        assert!((r.value + 0.375).abs() < 1e-12);
        let bad = LambdaSet { constraints: vec![LambdaConstraint { row: vec![1.0, 1.0], bound: 0.5 }] };
        assert!(matches!(robust_from_costs(&bad, &[0.0, 0.0], 0.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn inadmissible_control_rejected() {
        let s = builtin_example_one();
        let (g, b) = grid_bundle(100);
        assert!(cost(&s, 0, &ControlProcess::constant(vec![2.0]), &g, &b).is_err());
    }

    fn references(s: &Scenario, u: f64, paths: usize) -> Vec<GammaReference> {
        let (g, b) = grid_bundle(paths);
        (0..s.gamma_count())
            .map(|gamma| {
                let state = simulate_state(s, gamma, &ControlProcess::constant(vec![u]), &g, &b).unwrap();
                let first = solve_first_adjoint(s, &state, &b, &AdjointOptions::default()).unwrap();
                let second = solve_second_adjoint(s, &state, &first, &b, &AdjointOptions::default()).unwrap();
                GammaReference { state, first, second }
            })
            .collect()
    }

    #[test]
    fn zero_control_is_singular() {
        let s = builtin_example_one();
        let refs = references(&s, 0.0, 200);
        let face = robust_from_costs(&s.uncertainty.lambda_set, &[0.0, 0.0], 0.0).unwrap().argmax;
        let r = check_singular(&s, &refs, &face.samples(), 8, 3, SINGULAR_TOLERANCE).unwrap();
        assert_eq!(r.verdict, SingularityVerdict::Singular, "{r:?}");
        assert_eq!(r.first_order_residual, 0.0);
        assert!(r.classical_second_order_residual < 1e-12);
    }

    #[test]
    fn quadratic_control_cost_is_not_singular() {
        use crate::scenario::{AffineBilinearPack, AffineBilinearSpec};
        use std::sync::Arc;
        // g = ½u², h = 0, no dynamics
        let mut spec = AffineBilinearSpec::default();
        spec.cost.control = vec![vec![1.0]];
        let mut s = builtin_example_one();
        s.packs = vec![Arc::new(AffineBilinearPack::new(&spec, 1, 1).unwrap())];
        s.uncertainty = crate::scenario::UncertaintyModel::discrete(vec!["1".into()]);
        let refs = references(&s, 0.0, 100);
        let r = check_singular(&s, &refs, &[vec![1.0]], 4, 3, SINGULAR_TOLERANCE).unwrap();
        assert_eq!(r.first_order_residual, 0.0);
        assert!((r.classical_second_order_residual - 1.0).abs() < 1e-12);
        assert_eq!(r.verdict, SingularityVerdict::Nonsingular);
    }
}
