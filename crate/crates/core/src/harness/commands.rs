//! Subcommand bodies. Each returns the process exit code on success.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{ControlSpec, GridSection, McSection, OutputSection, RunConfig, ScenarioSection, SolverSection};
use super::manifest::OutputSink;
use super::pipeline::{
    admissibility, certify, duality_stage, make_bundle, regime_diagnostics, regime_pass, robust_stage, CertifyOutcome,
    CertifyVerdict, DualityStage, Probes, RegimeDiagnostics, RegimeNeeds, Settings, StageSeeds,
};
use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, write_adjoint_csv, AdjointOptions};
use crate::conditions::ConditionVerdict;
use crate::error::{Error, Result};
use crate::forward::{simulate_state, write_stats_csv, ControlProcess};
use crate::robust::{singularity_from_samples, RobustReport, SingularityVerdict};
use crate::scenario::{Scenario, FAMILY_EXAMPLE_ONE, FAMILY_EXAMPLE_TWO};
use crate::spaces::SpaceTag;

/// Inputs shared by every command once the configuration is resolved.
pub struct Prepared {
    pub config: RunConfig,
    pub scenario: Scenario,
    pub control: ControlProcess,
    pub grid: crate::paths::TimeGrid,
    pub settings: Settings,
    pub seeds: StageSeeds,
}

impl Prepared {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let scenario = config.scenario()?;
        let control = config.control(&scenario)?;
        let grid = config.grid(&scenario)?;
        let seed = config.seed()?;
        let settings = Settings {
            paths: config.mc.paths,
            seed,
            antithetic: config.mc.antithetic,
            solver: config.solver.clone(),
        };
        Ok(Self { config, scenario, control, grid, settings, seeds: StageSeeds::from_master(seed) })
    }

    fn bundle(&self) -> Result<crate::paths::BrownianBundle> {
        make_bundle(self.grid, self.settings.paths, self.seeds.bundle, self.settings.antithetic)
    }

    fn sink(&self, command: &str) -> Result<OutputSink> {
        let mut sink = OutputSink::new(command, &self.config)?;
        let sd = &self.seeds;
        for (k, v) in [
            ("master", sd.master),
            ("bundle", sd.bundle),
            ("test_data", sd.test_data),
            ("singularity", sd.singularity),
            ("probes", sd.probes),
        ] {
            sink.manifest.seeds.insert(k.into(), v);
        }
        let sv = &self.settings.solver;
        sink.manifest.tolerances.insert("singular".into(), sv.singular_tolerance);
        sink.manifest.tolerances.insert("argmax_std_factor".into(), sv.argmax_std_factor);
        sink.manifest.tolerances.insert("scheme_constant".into(), crate::adjoint::SCHEME_CONSTANT);
        Ok(sink)
    }
}

fn csv_header<W: Write>(w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(["t", "stat", "value", "gamma", "label"]).map_err(|e| Error::Io(e.to_string()))
}

/// Ensemble statistics of the state for every regime.
pub fn cmd_simulate(p: &Prepared) -> Result<i32> {
    let s = &p.scenario;
    let bundle = p.bundle()?;
    admissibility(s, &p.control, &bundle)?;
    let mut sink = p.sink("simulate")?;
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    let mut buf = Vec::new();
    {
        let mut out = csv::Writer::from_writer(&mut buf);
        csv_header(&mut out)?;
        for gamma in 0..s.gamma_count() {
            let st = simulate_state(s, gamma, &p.control, &p.grid, &bundle).map_err(|e| e.in_stage("simulate"))?;
            write_stats_csv(&mut out, &st.x, &p.grid, &s.uncertainty.gammas[gamma], "x", &w)?;
        }
    }
    sink.csv("stats.csv", |b| {
        b.extend_from_slice(&buf);
        Ok(())
    })?;
    sink.finish()?;
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointReport {
    pub regimes: Vec<RegimeDiagnostics>,
    pub dualities: DualityStage,
}

/// Adjoint means per regime plus the duality checks.
pub fn cmd_adjoint(p: &Prepared) -> Result<i32> {
    let s = &p.scenario;
    let bundle = p.bundle()?;
    admissibility(s, &p.control, &bundle)?;
    let mut sink = p.sink("adjoint")?;
    let solver = &p.settings.solver;
    let opts = AdjointOptions {
        basis: solver.basis,
        method: None,
        max_operator_values: solver.max_operator_values,
        keep_pre: false,
    };
    let mut buf = Vec::new();
    let mut regimes = Vec::new();
    {
        let mut out = csv::Writer::from_writer(&mut buf);
        csv_header(&mut out)?;
        for gamma in 0..s.gamma_count() {
            let st = simulate_state(s, gamma, &p.control, &p.grid, &bundle).map_err(|e| e.in_stage("simulate"))?;
            let a1 = solve_first_adjoint(s, &st, &bundle, &opts).map_err(|e| e.in_stage("first adjoint"))?;
            let a2 = solve_second_adjoint(s, &st, &a1, &bundle, &opts).map_err(|e| e.in_stage("second adjoint"))?;
            write_adjoint_csv(&mut out, &p.grid, &a1, Some(&a2), &s.uncertainty.gammas[gamma], "adjoint")?;
            regimes.push(regime_diagnostics(s, &st, &a1, &a2));
        }
    }
    let probes = Probes::new(s, solver, &p.seeds);
    let direction = probes.directions.first().ok_or_else(|| Error::InvalidArgument("no probe directions".into()))?;
    let dualities = duality_stage(s, &p.control, &bundle, direction, solver, p.seeds.test_data)
        .map_err(|e| e.in_stage("duality"))?;
    let pass = dualities.pass;
    sink.csv("adjoint.csv", |b| {
        b.extend_from_slice(&buf);
        Ok(())
    })?;
    sink.manifest.verdicts.insert("dualities".into(), if pass { "pass" } else { "fail" }.into());
    sink.json("adjoint.json", &AdjointReport { regimes, dualities })?;
    sink.finish()?;
    Ok(if pass { 0 } else { 3 })
}

/// Regime costs, the worst case over Λ, and the singularity test.
pub fn cmd_robust(p: &Prepared) -> Result<i32> {
    let s = &p.scenario;
    let bundle = p.bundle()?;
    admissibility(s, &p.control, &bundle)?;
    let mut sink = p.sink("robust")?;
    let solver = &p.settings.solver;
    let (costs, tol, robust) = robust_stage(s, &p.control, &bundle, solver)?;
    let probes = Probes::new(s, solver, &p.seeds);
    let none = RegimeNeeds { pairings: false, cells: false };
    let samples = (0..s.gamma_count())
        .map(|g| regime_pass(s, g, &p.control, &bundle, solver, &probes, none).map(|o| o.hamiltonian))
        .collect::<Result<Vec<_>>>()?;
    let singularity = singularity_from_samples(s, &samples, &robust.argmax.samples(), solver.singular_tolerance)
        .map_err(|e| e.in_stage("singularity"))?;
    sink.manifest.tolerances.insert("argmax".into(), tol);
    sink.manifest.verdicts.insert("singularity".into(), format!("{:?}", singularity.verdict).to_lowercase());
    let inconclusive = singularity.verdict == SingularityVerdict::Inconclusive;
    let report = RobustReport {
        costs,
        robust,
        singularity: Some(singularity),
        seeds: vec![p.seeds.master, p.seeds.bundle, p.seeds.singularity],
    };
    sink.json("robust.json", &report)?;
    sink.finish()?;
    Ok(if inconclusive { 3 } else { 0 })
}

/// Writes the report, the condition tables, and the manifest of a certify run.
pub fn write_certify(sink: &mut OutputSink, o: &CertifyOutcome) -> Result<()> {
    let r = &o.report;
    sink.manifest.tolerances.insert("argmax".into(), r.argmax_tolerance);
    sink.manifest.verdicts.insert("certify".into(), label(r.verdict));
    sink.manifest.verdicts.insert("singularity".into(), format!("{:?}", r.singularity.verdict).to_lowercase());
    sink.manifest.verdicts.insert("dualities".into(), if r.dualities.pass { "pass" } else { "fail" }.into());
    for (name, c) in [("integral", &o.integral), ("pointwise", &o.pointwise)] {
        if let Some(c) = c {
            sink.manifest.verdicts.insert(name.into(), condition_label(c.verdict));
            sink.csv(&format!("{name}.csv"), |b| c.write_csv(b))?;
        }
    }
    sink.json("certify.json", r)?;
    sink.manifest.timings.clone_from(&o.timings);
    Ok(())
}

fn label(v: CertifyVerdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn condition_label(v: ConditionVerdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub fn cmd_certify(p: &Prepared) -> Result<i32> {
    let mut sink = p.sink("certify")?;
    let o = certify(&p.scenario, &p.control, p.grid, &p.settings)?;
    write_certify(&mut sink, &o)?;
    sink.finish()?;
    print_certify(&o);
    Ok(o.report.verdict.exit_code())
}

fn print_certify(o: &CertifyOutcome) {
    let r = &o.report;
    println!("scenario {} control {} verdict {}", r.scenario, r.control, label(r.verdict));
    println!(
        "robust cost {:.6} at lambda {:?}; singularity {:?}",
        r.robust.value, r.robust.lambda_star, r.singularity.verdict
    );
    for (name, c) in [("integral", &r.integral), ("pointwise", &r.pointwise)] {
        if let Some(c) = c {
            println!("{name}: {} (extreme {:.6})", condition_label(c.verdict), c.extreme);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExampleId {
    Example1,
    Example2,
}

/// One golden comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCheck {
    pub quantity: String,
    pub value: f64,
    pub expected: String,
    pub tolerance: f64,
    pub pass: bool,
}

impl GoldenCheck {
    fn near(quantity: &str, value: f64, target: f64, tolerance: f64) -> Self {
        Self {
            quantity: quantity.into(),
            value,
            expected: format!("{target}"),
            tolerance,
            pass: (value - target).abs() <= tolerance,
        }
    }

    fn below(quantity: &str, value: f64, bound: f64) -> Self {
        Self { quantity: quantity.into(), value, expected: format!("< {bound:e}"), tolerance: 0.0, pass: value < bound }
    }

    fn holds(quantity: &str, ok: bool, expected: &str) -> Self {
        Self {
            quantity: quantity.into(),
            value: if ok { 1.0 } else { 0.0 },
            expected: expected.into(),
            tolerance: 0.0,
            pass: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub example: String,
    pub checks: Vec<GoldenCheck>,
    pub pass: bool,
}

/// Paths at which the example-one Monte Carlo tolerances take their nominal value.
pub const REFERENCE_PATHS: usize = 200_000;
/// Round-off level for quantities that are exact by construction.
pub const EXACT_TOLERANCE: f64 = 1e-9;

/// Monte Carlo tolerance `base·√(REFERENCE_PATHS / paths)`.
pub fn mc_tolerance(base: f64, paths: usize) -> f64 {
    base * (REFERENCE_PATHS as f64 / paths as f64).sqrt()
}

/// Budget for `E‖φ₁(T)‖²`: 5% of the initial energy at 16 modes and 400 steps,
/// shrinking in proportion to `1/(N·M)`.
pub fn nulling_budget(initial_energy: f64, modes: usize, steps: usize) -> f64 {
    0.05 * initial_energy * (16.0 * 400.0) / (modes * steps) as f64
}

/// Pinned configuration of a reproduction run.
pub fn reproduce_config(example: ExampleId) -> RunConfig {
    let (source, modes, steps, paths, control) = match example {
        ExampleId::Example1 => (FAMILY_EXAMPLE_ONE, None, 200, REFERENCE_PATHS, ControlSpec::Zero {}),
        ExampleId::Example2 => (FAMILY_EXAMPLE_TWO, Some(16), 400, 10_000, ControlSpec::Nulling {}),
    };
    let dir = match example {
        ExampleId::Example1 => "rsoc-out/example1",
        ExampleId::Example2 => "rsoc-out/example2",
    };
    RunConfig {
        scenario: ScenarioSection { source: source.into(), modes },
        grid: GridSection { horizon: None, steps },
        mc: McSection { paths, seed: Some(20_240_601), antithetic: false },
        solver: SolverSection::default(),
        control,
        outputs: OutputSection { directory: dir.into(), ..Default::default() },
    }
}

pub fn example_one_checks(p: &Prepared, o: &CertifyOutcome) -> Result<Vec<GoldenCheck>> {
    let r = &o.report;
    let paths = p.settings.paths;
    let mut checks = Vec::new();
    for c in &r.costs.per_gamma {
        checks.push(GoldenCheck::near(&format!("J(0; {})", c.label), c.total, 0.0, EXACT_TOLERANCE));
    }
    for d in &r.regimes {
        let b = &d.blocks[0];
        checks.push(GoldenCheck::below(&format!("sup rms p ({})", d.label), b.first_adjoint_rms, EXACT_TOLERANCE));
        checks.push(GoldenCheck::below(&format!("sup rms q ({})", d.label), b.first_correction_rms, EXACT_TOLERANCE));
        checks.push(GoldenCheck::near(&format!("min P ({})", d.label), b.second_adjoint_bottom_eigenvalue, 1.0, EXACT_TOLERANCE));
        checks.push(GoldenCheck::near(&format!("max P ({})", d.label), b.second_adjoint_top_eigenvalue, 1.0, EXACT_TOLERANCE));
        if let Some((lo, hi)) = d.s_operator_range {
            checks.push(GoldenCheck::near(&format!("min S ({})", d.label), lo, 1.0, EXACT_TOLERANCE));
            checks.push(GoldenCheck::near(&format!("max S ({})", d.label), hi, 1.0, EXACT_TOLERANCE));
        }
    }
    checks.push(GoldenCheck::holds(
        "singularity of u = 0",
        r.singularity.verdict == SingularityVerdict::Singular,
        "singular",
    ));
    if let Some(i) = &r.integral {
        checks.push(GoldenCheck::near("min integral condition", i.extreme, -0.5, mc_tolerance(0.02, paths)));
    }
    if let Some(pw) = &r.pointwise {
        checks.push(GoldenCheck::near("max pointwise condition", pw.extreme, 1.0, mc_tolerance(0.02, paths)));
    }
    checks.push(GoldenCheck::holds("certify verdict", r.verdict == CertifyVerdict::Violated, "violated"));
    let one = ControlProcess::constant(vec![1.0]);
    let bundle = p.bundle()?;
    let (costs, _, robust) = robust_stage(&p.scenario, &one, &bundle, &p.settings.solver)?;
    let tol = mc_tolerance(0.01, paths);
    checks.push(GoldenCheck::near("J(1; 1)", costs.per_gamma[0].total, -0.5, tol));
    checks.push(GoldenCheck::near("J(1; 2)", costs.per_gamma[1].total, -0.25, 0.01));
    checks.push(GoldenCheck::near("robust J(1)", robust.value, -0.25, tol));
    checks.push(GoldenCheck::holds("argmax measure", robust.lambda_star == [0.0, 1.0], "(0, 1)"));
    Ok(checks)
}

pub fn example_two_checks(p: &Prepared, o: &CertifyOutcome) -> Vec<GoldenCheck> {
    let r = &o.report;
    let modes = p.scenario.state_blocks[0].1;
    let mut checks = Vec::new();
    for d in &r.regimes {
        let b = &d.blocks[0];
        checks.push(GoldenCheck::below(&format!("sup rms p1 ({})", d.label), b.first_adjoint_rms, 1e-2));
        checks.push(GoldenCheck::below(&format!("sup rms q1 ({})", d.label), b.first_correction_rms, 1e-2));
        checks.push(GoldenCheck::below(
            &format!("E|phi1(T)|^2 ({})", d.label),
            b.terminal_energy,
            nulling_budget(b.initial_energy, modes, p.grid.steps()),
        ));
    }
    // the second regime's terminal cost does not see the first component, so its P11 vanishes
    if let Some(d) = r.regimes.first() {
        let b = &d.blocks[0];
        checks.push(GoldenCheck::holds(
            &format!("P11 negative semidefinite ({})", d.label),
            b.second_adjoint_top_eigenvalue <= 0.0,
            "max eigenvalue <= 0",
        ));
        checks.push(GoldenCheck::below(&format!("leading entry of P11 ({})", d.label), b.second_adjoint_lead_entry, 0.0));
    }
    checks.push(GoldenCheck::holds(
        "singularity of the nulling control",
        r.singularity.verdict == SingularityVerdict::Singular,
        "singular",
    ));
    checks.push(GoldenCheck::holds("certify verdict", r.verdict == CertifyVerdict::Consistent, "consistent"));
    checks
}

pub fn cmd_reproduce(p: &Prepared, example: ExampleId) -> Result<i32> {
    let mut sink = p.sink("reproduce")?;
    let o = certify(&p.scenario, &p.control, p.grid, &p.settings)?;
    write_certify(&mut sink, &o)?;
    let checks = match example {
        ExampleId::Example1 => example_one_checks(p, &o)?,
        ExampleId::Example2 => example_two_checks(p, &o),
    };
    let pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!(
            "{} {}: {:.6e} (expected {}{})",
            if c.pass { "ok  " } else { "FAIL" },
            c.quantity,
            c.value,
            c.expected,
            if c.tolerance > 0.0 { format!(" ± {:.3e}", c.tolerance) } else { String::new() }
        );
    }
    let name = match example {
        ExampleId::Example1 => "example1",
        ExampleId::Example2 => "example2",
    };
    sink.manifest.verdicts.insert("reproduce".into(), if pass { "pass" } else { "fail" }.into());
    sink.json("reproduce.json", &ReproduceReport { example: name.into(), checks, pass })?;
    sink.finish()?;
    Ok(if pass { 0 } else { 3 })
}

/// Small end-to-end runs with known answers.
pub fn cmd_selftest() -> Result<i32> {
    let mut all = true;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        all &= ok;
    };
    let quick = |example: ExampleId, paths: usize, steps: usize| -> Result<(Prepared, CertifyOutcome)> {
        let mut c = reproduce_config(example);
        c.mc.paths = paths;
        c.grid.steps = steps;
        if example == ExampleId::Example2 {
            c.scenario.modes = Some(4);
        }
        let p = Prepared::new(c)?;
        let o = certify(&p.scenario, &p.control, p.grid, &p.settings)?;
        Ok((p, o))
    };
    let (p1, o1) = quick(ExampleId::Example1, 4000, 50)?;
    let failed: Vec<String> =
        example_one_checks(&p1, &o1)?.into_iter().filter(|c| !c.pass).map(|c| c.quantity).collect();
    report("example1 certify", failed.is_empty(), format!("verdict {}, failed {failed:?}", label(o1.report.verdict)));
    let (_, o2) = quick(ExampleId::Example2, 400, 100)?;
    let r2 = &o2.report;
    report(
        "example2 certify",
        r2.verdict == CertifyVerdict::Consistent,
        format!("verdict {} at 4 modes", label(r2.verdict)),
    );
    let c = reproduce_config(ExampleId::Example1);
    let again = RunConfig::parse(&c.to_toml()?)?;
    report("config round trip", again == c, "serialize(parse(x)) == x".into());
    let bad = RunConfig {
        control: ControlSpec::Constant { value: vec![2.0] },
        mc: McSection { paths: 100, ..c.mc.clone() },
        ..c.clone()
    };
    let rejected = Prepared::new(bad)
        .and_then(|p| admissibility(&p.scenario, &p.control, &p.bundle()?));
    report("inadmissible control rejected", rejected.is_err(), "u = 2 on U = [-1, 1]".into());
    Ok(if all { 0 } else { 3 })
}
