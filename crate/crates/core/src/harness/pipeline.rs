//! The certification pipeline. Every condition is linear in the measure, so each
//! regime is processed on its own and only its reduced outputs are kept: at most one
//! regime's state and adjoints are alive at any time.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, SolverSection};
use crate::adjoint::{
    duality_identities, solve_first_adjoint, solve_second_adjoint, verify_operator_pairings,
    verify_transposition_first, AdjointFirst, AdjointMethod, AdjointOptions,
    AdjointSecond, DualityResidual, FirstTestData, OperatorProcess, SecondTestData,
};
use crate::conditions::{
    assemble_s, collect_pairings, integral_from_pairings, nabla_s, pointwise_cells, pointwise_from_cells,
    regime_pairings, ConditionKind, ConditionReport, ConditionVerdict, LambdaChoice, PointwiseCells, PointwiseInputs,
    Witness, POINTWISE_PATH_CAP,
};
use crate::error::{Error, Result};
use crate::forward::{simulate_state, simulate_variations, ControlProcess, StateEnsemble};
use crate::paths::{AdaptedProcess, BrownianBundle, TimeGrid};
use crate::robust::{
    cost_breakdown, hamiltonian_samples, robust_from_costs, singularity_from_samples, singularity_points,
    CostBreakdown, GammaReference, HamiltonianSamples, RobustCost, SingularityReport, SingularityVerdict,
};
use crate::scenario::Scenario;
use crate::spaces::SpaceTag;

/// Monte Carlo and solver settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub solver: SolverSection,
}

/// Seeds of every random stage, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub master: u64,
    pub bundle: u64,
    pub test_data: u64,
    pub singularity: u64,
    pub probes: u64,
}

impl StageSeeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            bundle: derive_seed(master, "bundle"),
            test_data: derive_seed(master, "test_data"),
            singularity: derive_seed(master, "singularity"),
            probes: derive_seed(master, "probes"),
        }
    }
}

/// Brownian paths of a run; with `antithetic` the second half mirrors the first.
pub fn make_bundle(grid: TimeGrid, paths: usize, seed: u64, antithetic: bool) -> Result<BrownianBundle> {
    if !antithetic {
        return BrownianBundle::generate(grid, paths, seed);
    }
    if !paths.is_multiple_of(2) {
        return Err(Error::InvalidArgument("antithetic sampling needs an even path count".into()));
    }
    let half = BrownianBundle::generate(grid, paths / 2, seed)?;
    let mut inc = half.increments().to_vec();
    inc.extend(half.increments().iter().map(|v| -v));
    BrownianBundle::from_increments(grid, inc, seed)
}

fn adjoint_options(solver: &SolverSection, keep_pre: bool) -> AdjointOptions {
    AdjointOptions { basis: solver.basis, method: None, max_operator_values: solver.max_operator_values, keep_pre }
}

/// Per-block summaries of one regime's state and adjoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub start: usize,
    pub len: usize,
    /// `E‖x_b(0)‖²_H`.
    pub initial_energy: f64,
    /// `E‖x_b(T)‖²_H`.
    pub terminal_energy: f64,
    /// `sup_t (E‖p_b(t)‖²_H)^{1/2}`.
    pub first_adjoint_rms: f64,
    pub first_correction_rms: f64,
    /// Largest eigenvalue over grid times of the H-symmetric part of `E P_bb(t)`.
    pub second_adjoint_top_eigenvalue: f64,
    /// Smallest eigenvalue over grid times of the same.
    pub second_adjoint_bottom_eigenvalue: f64,
    /// Largest value over grid times of the block's leading diagonal entry of `E P`.
    /// Eigenvalues of strongly damped modes underflow to zero, this one does not.
    pub second_adjoint_lead_entry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDiagnostics {
    pub gamma: usize,
    pub label: String,
    pub first_adjoint_method: AdjointMethod,
    pub second_adjoint_deterministic: bool,
    pub blocks: Vec<BlockDiagnostics>,
    /// Entry range of `S*`, when it was assembled.
    pub s_operator_range: Option<(f64, f64)>,
}

fn block_weights(w: &[f64], start: usize, len: usize) -> Vec<f64> {
    w.iter().enumerate().map(|(i, &v)| if (start..start + len).contains(&i) { v } else { 0.0 }).collect()
}

fn energy_at(x: &AdaptedProcess, w: &[f64], k: usize) -> f64 {
    let total: f64 =
        (0..x.paths()).map(|p| x.at(p, k).iter().zip(w).map(|(a, w)| a * a * w * w).sum::<f64>()).sum();
    total / x.paths() as f64
}

/// Path means of `P(t_k)` for every `k`.
fn mean_operator(p: &OperatorProcess) -> Vec<Vec<f64>> {
    match p {
        OperatorProcess::Deterministic { values, .. } => values.clone(),
        OperatorProcess::Stochastic { n, paths, steps, .. } => (0..=*steps)
            .map(|k| {
                let mut acc = vec![0.0; n * n];
                for path in 0..*paths {
                    acc.iter_mut().zip(p.at(path, k)).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= *paths as f64);
                acc
            })
            .collect(),
    }
}

/// Extreme eigenvalues of the symmetric part of `D P_bb D⁻¹`, `D = diag(w_b)`.
fn eigen_range(m: &[f64], n: usize, w: &[f64], start: usize, len: usize) -> (f64, f64) {
    let a = DMatrix::from_fn(len, len, |i, j| {
        let (gi, gj) = (start + i, start + j);
        w[gi] * m[gi * n + gj] / w[gj]
    });
    let sym = (&a + a.transpose()) * 0.5;
    let ev = SymmetricEigen::new(sym).eigenvalues;
    (ev.min(), ev.max())
}

pub fn regime_diagnostics(
    s: &Scenario,
    state: &StateEnsemble,
    first: &AdjointFirst,
    second: &AdjointSecond,
) -> RegimeDiagnostics {
    let w = s.spaces.weights(SpaceTag::H);
    let n = s.state_dim();
    let m = state.grid.steps();
    let means = mean_operator(&second.p);
    let blocks = s
        .state_blocks
        .iter()
        .map(|&(start, len)| {
            let wb = block_weights(w, start, len);
            let sup = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
            let (bottom, top) = means
                .iter()
                .map(|pk| eigen_range(pk, n, w, start, len))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a), hi.max(b)));
            BlockDiagnostics {
                start,
                len,
                initial_energy: energy_at(&state.x, &wb, 0),
                terminal_energy: energy_at(&state.x, &wb, m),
                first_adjoint_rms: sup(first.p.rms_profile(None, &wb)),
                first_correction_rms: sup(first.q.rms_profile(None, &wb)),
                second_adjoint_top_eigenvalue: top,
                second_adjoint_bottom_eigenvalue: bottom,
                second_adjoint_lead_entry: means.iter().map(|pk| pk[start * n + start]).fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    RegimeDiagnostics {
        gamma: state.gamma,
        label: s.uncertainty.gammas[state.gamma].clone(),
        first_adjoint_method: first.method,
        second_adjoint_deterministic: second.deterministic,
        blocks,
        s_operator_range: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDualities {
    pub gamma: usize,
    pub residuals: Vec<DualityResidual>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityStage {
    pub paths: usize,
    pub trials: usize,
    pub regimes: Vec<RegimeDualities>,
    pub pass: bool,
}

/// The transposition pairings and the three duality identities of one regime.
pub fn regime_dualities(
    s: &Scenario,
    state: &StateEnsemble,
    first: &AdjointFirst,
    second: &AdjointSecond,
    direction: &ControlProcess,
    bundle: &BrownianBundle,
    trials: usize,
    seed: u64,
) -> Result<Vec<DualityResidual>> {
    let (n, m) = (s.state_dim(), state.grid.steps());
    let seed = derive_seed(seed, &format!("regime{}", state.gamma));
    let first_data = FirstTestData::random_set(n, m, trials, seed);
    let second_data = SecondTestData::random_set(n, m, trials, seed ^ 1);
    let (pairing, relaxed) = verify_operator_pairings(s, state, first, second, bundle, &second_data, seed ^ 1)?;
    let mut out = vec![verify_transposition_first(s, state, first, bundle, &first_data, seed)?, pairing, relaxed];
    let var = simulate_variations(s, state, direction, bundle)?;
    out.extend(duality_identities(s, state, &var, first, second, bundle)?);
    Ok(out)
}

/// Dualities of every regime on the first `solver.duality_paths` paths.
pub fn duality_stage(
    s: &Scenario,
    u: &ControlProcess,
    bundle: &BrownianBundle,
    direction: &ControlProcess,
    solver: &SolverSection,
    seed: u64,
) -> Result<DualityStage> {
    let sub = bundle.truncate_paths(solver.duality_paths);
    let grid = *sub.grid();
    let opts = adjoint_options(solver, true);
    let regimes = (0..s.gamma_count())
        .map(|gamma| {
            let state = simulate_state(s, gamma, u, &grid, &sub)?;
            let first = solve_first_adjoint(s, &state, &sub, &opts)?;
            let second = solve_second_adjoint(s, &state, &first, &sub, &opts)?;
            let residuals =
                regime_dualities(s, &state, &first, &second, direction, &sub, solver.duality_trials, seed)?;
            Ok(RegimeDualities { gamma, residuals })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = regimes.iter().all(|r| r.residuals.iter().all(|d| d.pass));
    Ok(DualityStage { paths: sub.paths(), trials: solver.duality_trials, regimes, pass })
}

/// What the streaming pass must keep from one regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeNeeds {
    pub pairings: bool,
    pub cells: bool,
}

/// Reduced outputs of one regime.
pub struct RegimeOutput {
    pub diagnostics: RegimeDiagnostics,
    pub hamiltonian: HamiltonianSamples,
    pub pairings: Option<Vec<Vec<f64>>>,
    pub cells: Option<PointwiseCells>,
    pub notes: Vec<String>,
}

/// Probe sets shared by all regimes.
pub struct Probes {
    pub hamiltonian: Vec<Vec<f64>>,
    pub directions: Vec<ControlProcess>,
    pub pointwise: Vec<Vec<f64>>,
}

impl Probes {
    pub fn new(s: &Scenario, solver: &SolverSection, seeds: &StageSeeds) -> Self {
        let w1 = s.spaces.weights(SpaceTag::H1);
        Self {
            hamiltonian: singularity_points(s, solver.singularity_directions, seeds.singularity),
            directions: s
                .control_set
                .probe_points(w1, solver.integral_directions, seeds.probes)
                .into_iter()
                .map(ControlProcess::constant)
                .collect(),
            pointwise: s.control_set.probe_points(w1, solver.probe_points, seeds.probes),
        }
    }
}

/// State, adjoints and condition ingredients of one regime, reduced before returning.
pub fn regime_pass(
    s: &Scenario,
    gamma: usize,
    u: &ControlProcess,
    bundle: &BrownianBundle,
    solver: &SolverSection,
    probes: &Probes,
    needs: RegimeNeeds,
) -> Result<RegimeOutput> {
    let grid = *bundle.grid();
    let opts = adjoint_options(solver, false);
    let state = simulate_state(s, gamma, u, &grid, bundle).map_err(|e| e.in_stage("simulate"))?;
    let first = solve_first_adjoint(s, &state, bundle, &opts).map_err(|e| e.in_stage("first adjoint"))?;
    let second =
        solve_second_adjoint(s, &state, &first, bundle, &opts).map_err(|e| e.in_stage("second adjoint"))?;
    let mut diagnostics = regime_diagnostics(s, &state, &first, &second);
    let r = GammaReference { state, first, second };
    let hamiltonian = hamiltonian_samples(s, &r, &probes.hamiltonian).map_err(|e| e.in_stage("singularity"))?;
    let mut notes = Vec::new();
    if !needs.pairings && !needs.cells {
        return Ok(RegimeOutput { diagnostics, hamiltonian, pairings: None, cells: None, notes });
    }
    let sop = assemble_s(s, &r, solver.max_operator_values).map_err(|e| e.in_stage("S operator"))?;
    diagnostics.s_operator_range = Some(sop.value_range());
    // only the state and S are read from here on
    let GammaReference { state, first, second } = r;
    drop((first, second));
    let pairings = needs
        .pairings
        .then(|| regime_pairings(s, &state, &sop, &probes.directions, bundle))
        .transpose()
        .map_err(|e| e.in_stage("integral condition"))?;
    let mut cells = None;
    if needs.cells {
        match (nabla_s(&sop), u.nabla(&bundle.truncate_paths(POINTWISE_PATH_CAP))) {
            (Some(ns), Some(nu)) => {
                let inp = PointwiseInputs { state: &state, s_op: &sop, nabla_s: &ns, nabla_control: &nu };
                cells = Some(
                    pointwise_cells(s, &inp, &probes.pointwise).map_err(|e| e.in_stage("pointwise condition"))?,
                );
            }
            (None, _) => notes.push(format!("regime {gamma}: S depends on the path and ∇S is not available")),
            (_, None) => notes.push(format!("regime {gamma}: the candidate control has no closed-form ∇u")),
        }
    }
    Ok(RegimeOutput { diagnostics, hamiltonian, pairings, cells, notes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertifyVerdict {
    /// Singular, and neither second order condition is breached.
    Consistent,
    /// Singular, and a second order condition is breached.
    Violated,
    /// The classical conditions already discriminate; nothing further to certify.
    Nonsingular,
    Inconclusive,
}

impl CertifyVerdict {
    pub fn exit_code(self) -> i32 {
        match self {
            CertifyVerdict::Consistent | CertifyVerdict::Nonsingular => 0,
            CertifyVerdict::Violated => 1,
            CertifyVerdict::Inconclusive => 3,
        }
    }
}

/// A condition report without its entry table (the table goes to CSV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub kind: ConditionKind,
    pub verdict: ConditionVerdict,
    pub extreme: f64,
    pub entries: usize,
    pub lambda_used: Vec<Vec<f64>>,
    pub witness: Option<Witness>,
    pub notes: Vec<String>,
}

impl From<&ConditionReport> for ConditionSummary {
    fn from(r: &ConditionReport) -> Self {
        Self {
            kind: r.kind,
            verdict: r.verdict,
            extreme: r.extreme,
            entries: r.entries.len(),
            lambda_used: r.lambda_used.clone(),
            witness: r.witness.clone(),
            notes: r.notes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub scenario: String,
    pub control: String,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub antithetic: bool,
    pub seeds: StageSeeds,
    pub admissibility: String,
    pub costs: CostBreakdown,
    pub argmax_tolerance: f64,
    pub robust: RobustCost,
    pub dualities: DualityStage,
    pub regimes: Vec<RegimeDiagnostics>,
    pub singularity: SingularityReport,
    pub integral: Option<ConditionSummary>,
    pub pointwise: Option<ConditionSummary>,
    pub verdict: CertifyVerdict,
    pub notes: Vec<String>,
}

pub struct CertifyOutcome {
    pub report: CertifyReport,
    pub integral: Option<ConditionReport>,
    pub pointwise: Option<ConditionReport>,
    /// `(stage, seconds)`, kept out of the report so reports are reproducible.
    pub timings: Vec<(String, f64)>,
}

struct Clock {
    last: Instant,
    laps: Vec<(String, f64)>,
}

impl Clock {
    fn new() -> Self {
        Self { last: Instant::now(), laps: Vec::new() }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.laps.push((stage.into(), (now - self.last).as_secs_f64()));
        self.last = now;
    }
}

/// Rejects inadmissible open-loop candidates before anything is simulated.
pub fn admissibility(s: &Scenario, u: &ControlProcess, bundle: &BrownianBundle) -> Result<String> {
    let checked = u.check_admissible(s, bundle).map_err(|e| e.in_stage("admissibility"))?;
    Ok(if checked {
        "u(t) ∈ U on every path and grid time".into()
    } else {
        "feedback control; admissibility checked along the simulated states".into()
    })
}

/// Regime costs and the worst case over Λ with its argmax face.
pub fn robust_stage(
    s: &Scenario,
    u: &ControlProcess,
    bundle: &BrownianBundle,
    solver: &SolverSection,
) -> Result<(CostBreakdown, f64, RobustCost)> {
    let costs = cost_breakdown(s, u, bundle.grid(), bundle).map_err(|e| e.in_stage("cost"))?;
    let tol = solver.argmax_std_factor * costs.max_std();
    let robust = robust_from_costs(&s.uncertainty.lambda_set, &costs.totals(), tol).map_err(|e| e.in_stage("robust"))?;
    Ok((costs, tol, robust))
}

/// Full pipeline: admissibility, robust cost, dualities, singularity, then the integral
/// and pointwise conditions when the candidate is singular.
pub fn certify(s: &Scenario, u: &ControlProcess, grid: TimeGrid, cfg: &Settings) -> Result<CertifyOutcome> {
    let mut clock = Clock::new();
    let seeds = StageSeeds::from_master(cfg.seed);
    let solver = &cfg.solver;
    let bundle = make_bundle(grid, cfg.paths, seeds.bundle, cfg.antithetic)?;
    clock.lap("paths");
    let admissibility = admissibility(s, u, &bundle)?;
    clock.lap("admissibility");
    let (costs, argmax_tolerance, robust) = robust_stage(s, u, &bundle, solver)?;
    clock.lap("robust");
    let probes = Probes::new(s, solver, &seeds);
    let direction = probes
        .directions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no probe directions in U".into()))?;
    let dualities = duality_stage(s, u, &bundle, direction, solver, seeds.test_data).map_err(|e| e.in_stage("duality"))?;
    clock.lap("duality");

    let face = robust.argmax.samples();
    let m = s.gamma_count();
    let mut regimes = Vec::with_capacity(m);
    let mut hamiltonian = Vec::with_capacity(m);
    let mut pairings = Vec::with_capacity(m);
    let mut cells = Vec::new();
    let mut notes = Vec::new();
    for gamma in 0..m {
        let needs = RegimeNeeds {
            pairings: face.iter().any(|l| l[gamma] != 0.0),
            cells: robust.lambda_star[gamma] != 0.0,
        };
        let out = regime_pass(s, gamma, u, &bundle, solver, &probes, needs)?;
        regimes.push(out.diagnostics);
        hamiltonian.push(out.hamiltonian);
        pairings.push(out.pairings.unwrap_or_else(|| vec![vec![0.0; bundle.paths()]; probes.directions.len()]));
        cells.extend(out.cells);
        notes.extend(out.notes);
        clock.lap(&format!("regime {gamma}"));
    }
    let singularity = singularity_from_samples(s, &hamiltonian, &face, solver.singular_tolerance)
        .map_err(|e| e.in_stage("singularity"))?;
    drop(hamiltonian);

    let (mut integral, mut pointwise) = (None, None);
    if singularity.verdict == SingularityVerdict::Singular {
        let by_dir = collect_pairings(&probes.directions, pairings);
        integral = Some(
            integral_from_pairings(s, &by_dir, &LambdaChoice::PerDirection(face.clone()), grid.dt())
                .map_err(|e| e.in_stage("integral condition"))?,
        );
        let active = (0..m).filter(|&g| robust.lambda_star[g] != 0.0).count();
        if cells.len() == active {
            pointwise = Some(
                pointwise_from_cells(s, &cells, &probes.pointwise, &robust.lambda_star, grid.dt())
                    .map_err(|e| e.in_stage("pointwise condition"))?,
            );
        } else {
            notes.push("pointwise condition skipped".into());
        }
    } else {
        notes.push("candidate is not certified singular; second order conditions not evaluated".into());
    }
    clock.lap("conditions");

    let violated = [&integral, &pointwise].iter().any(|c| c.as_ref().is_some_and(|c| c.verdict == ConditionVerdict::Violated));
    let verdict = if !dualities.pass {
        notes.push("a duality residual exceeded its tolerance; verdicts downgraded to inconclusive".into());
        CertifyVerdict::Inconclusive
    } else {
        match singularity.verdict {
            SingularityVerdict::Nonsingular => CertifyVerdict::Nonsingular,
            SingularityVerdict::Inconclusive => CertifyVerdict::Inconclusive,
            SingularityVerdict::Singular if violated => CertifyVerdict::Violated,
            SingularityVerdict::Singular if pointwise.is_none() => CertifyVerdict::Inconclusive,
            SingularityVerdict::Singular => CertifyVerdict::Consistent,
        }
    };
    let report = CertifyReport {
        scenario: s.name.clone(),
        control: u.label.clone(),
        horizon: grid.horizon(),
        steps: grid.steps(),
        paths: bundle.paths(),
        antithetic: cfg.antithetic,
        seeds,
        admissibility,
        costs,
        argmax_tolerance,
        robust,
        dualities,
        regimes,
        singularity,
        integral: integral.as_ref().map(ConditionSummary::from),
        pointwise: pointwise.as_ref().map(ConditionSummary::from),
        verdict,
        notes,
    };
    Ok(CertifyOutcome { report, integral, pointwise, timings: clock.laps })
}
