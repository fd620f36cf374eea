//! Property tests for the invariants every module promises.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsoc::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointOptions};
use rsoc::conditions::{assemble_s, integral_condition, LambdaChoice};
use rsoc::forward::{nulling_control, simulate_first_variation, simulate_state, sup_moment, ControlProcess};
use rsoc::harness::commands::{reproduce_config, ExampleId};
use rsoc::harness::{ControlSpec, RunConfig};
use rsoc::malliavin::{malliavin_linear_sde, nabla_approx, MalliavinSource, DEFAULT_BAND_STEPS};
use rsoc::paths::{AdaptedProcess, BrownianBundle, TimeGrid};
use rsoc::robust::{cost_breakdown, robust_cost, robust_from_costs, GammaReference};
use rsoc::scenario::{
    builtin_example_one, load_scenario, ExampleTwoParams, LambdaConstraint, LambdaSet, Scenario, ScenarioFile,
};
use rsoc::spaces::{sine_coefficients, HOperator, HVector, SpaceTag};
use rsoc::{Registry, Semigroup};

fn example_two(modes: usize) -> (Scenario, ControlProcess) {
    (load_scenario("builtin:example2", Some(modes)).unwrap(), nulling_control(&ExampleTwoParams::default_for(modes)))
}

fn random_direction(paths: usize, steps: usize, dim: usize, seed: u64) -> AdaptedProcess {
    AdaptedProcess::from_path_fn(paths, steps, dim, SpaceTag::H1, move |p, row| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64) << 20);
        row.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    })
}

/// One-dimensional affine scenario; costs multiplied by `scale`.
fn affine_scenario(scale: f64, costs: bool) -> Scenario {
    let cost = |c: f64, t: f64| {
        if costs {
            format!("cost = {{ control = [[{}]], state = [[{}]], terminal = [[{}]] }}", scale * c, scale * 0.5, scale * t)
        } else {
            String::new()
        }
    };
    let text = format!(
        r#"
family = "affine_bilinear"
horizon = 1.0
state_dim = 1
control_dim = 1
eigenvalues = [-0.5]
initial_state = [1.0]

[control_set]
dim = 1
blocks = [{{ start = 0, len = 1, kind = "box", lower = -1.0, upper = 1.0 }}]

[[regimes]]
drift = {{ state = [[0.2]], control = [[1.0]] }}
diffusion = {{ state = [[0.3]], control = [[0.2]] }}
{}

[[regimes]]
drift = {{ control = [[2.0]] }}
diffusion = {{ offset = [0.1] }}
{}
"#,
        cost(1.0, -1.0),
        cost(0.5, 2.0)
    );
    ScenarioFile::parse(&text).and_then(|f| f.build()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn semigroup_property(s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let g: Semigroup = Semigroup::dirichlet_laplacian(8);
        let whole = g.exp_at(s + t).unwrap();
        let split = g.exp_at(s).unwrap().compose(&g.exp_at(t).unwrap()).unwrap();
        prop_assert!(whole.max_abs_diff(&split) < 1e-10);
    }

    #[test]
    fn adjoint_pairing(entries in prop::collection::vec(-2.0f64..2.0, 36), u in prop::collection::vec(-1.0f64..1.0, 6), v in prop::collection::vec(-1.0f64..1.0, 6)) {
        let reg: Registry = Registry::sine_blocks(3, 2);
        let rows: Vec<Vec<f64>> = entries.chunks(6).map(<[f64]>::to_vec).collect();
        let a = HOperator::from_rows(&rows, SpaceTag::H, SpaceTag::H).unwrap();
        let a_star = reg.adjoint(&a).unwrap();
        let (hu, hv) = (HVector::new(u.clone(), SpaceTag::H), HVector::new(v.clone(), SpaceTag::H));
        let lhs = reg.inner(&HVector::new(a.apply(&u), SpaceTag::H), &hv).unwrap();
        let rhs = reg.inner(&hu, &HVector::new(a_star.apply(&v), SpaceTag::H)).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn lp_matches_vertices(costs in prop::collection::vec(-5.0f64..5.0, 3), bound in 0.4f64..1.0) {
        let full = LambdaSet::full_simplex();
        let lp = full.maximize(&costs).unwrap();
        let brute = full.maximize_by_vertices(&costs).unwrap();
        let top = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(brute.value, top);
        prop_assert!((lp.value - top).abs() < 1e-12);
        // complementary slackness: mass only on maximal costs
        for (l, c) in lp.lambda.iter().zip(&costs) {
            prop_assert!(*l < 1e-12 || (top - c).abs() < 1e-9);
        }
        let cut = LambdaSet { constraints: vec![LambdaConstraint { row: vec![1.0, 0.0, 0.0], bound }] };
        let (a, b) = (cut.maximize(&costs).unwrap(), cut.maximize_by_vertices(&costs).unwrap());
        prop_assert!((a.value - b.value).abs() < 1e-9);
        prop_assert!(cut.contains(&a.lambda, 1e-9));
    }

    #[test]
    fn config_round_trip(paths in 100usize..100_000, steps in 2usize..2000, seed in any::<u64>(), value in -1.0f64..1.0, antithetic in any::<bool>()) {
        let mut c = reproduce_config(ExampleId::Example1);
        c.mc.paths = paths + (antithetic as usize) * (paths % 2);
        c.mc.seed = Some(seed);
        c.mc.antithetic = antithetic;
        c.grid.steps = steps;
        c.control = ControlSpec::Constant { value: vec![value] };
        let text = c.to_toml().unwrap();
        let again = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&again, &c);
        prop_assert_eq!(again.to_toml().unwrap(), text);
        prop_assert_eq!(again.hash().unwrap(), c.hash().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn first_variation_is_linear(kappa in 0.0f64..1.0, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (s, u) = example_two(3);
        let g = TimeGrid::new(s.horizon, 40).unwrap();
        let b = BrownianBundle::generate(g, 30, 3).unwrap();
        let x = simulate_state(&s, 0, &u, &g, &b).unwrap();
        let (d1, d2) = (random_direction(30, 40, 6, s1), random_direction(30, 40, 6, s2));
        let mix = d1.combine(kappa, &d2, 1.0 - kappa).unwrap();
        let y1 = simulate_first_variation(&s, &x, &d1, &b).unwrap().y;
        let y2 = simulate_first_variation(&s, &x, &d2, &b).unwrap().y;
        let ym = simulate_first_variation(&s, &x, &mix, &b).unwrap().y;
        let lin = y1.combine(kappa, &y2, 1.0 - kappa).unwrap();
        let gap = ym.values().iter().zip(lin.values()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-10, "{gap:e}");
    }

    #[test]
    fn variation_moments_scale_with_the_direction(c in 0.01f64..10.0, seed in any::<u64>()) {
        let (s, u) = example_two(3);
        let g = TimeGrid::new(s.horizon, 40).unwrap();
        let b = BrownianBundle::generate(g, 50, 5).unwrap();
        let x = simulate_state(&s, 0, &u, &g, &b).unwrap();
        let d = random_direction(50, 40, 6, seed);
        let dc = d.combine(c, &d, 0.0).unwrap();
        let w = s.spaces.weights(SpaceTag::H).to_vec();
        let y = simulate_first_variation(&s, &x, &d, &b).unwrap().y;
        let yc = simulate_first_variation(&s, &x, &dc, &b).unwrap().y;
        for p in [2.0, 4.0] {
            let (m1, mc) = (sup_moment(&y, &w, p), sup_moment(&yc, &w, p));
            prop_assert!(m1.is_finite() && m1 > 0.0);
            prop_assert!((mc / c - m1).abs() <= 1e-9 * m1, "p={p}: {mc} / {c} vs {m1}");
        }
    }

    #[test]
    fn cost_scaling_keeps_the_argmax(c in 0.1f64..10.0) {
        let (base, scaled) = (affine_scenario(1.0, true), affine_scenario(c, true));
        let g = TimeGrid::new(1.0, 40).unwrap();
        let b = BrownianBundle::generate(g, 400, 9).unwrap();
        let u = ControlProcess::constant(vec![0.3]);
        let (cb, rb) = robust_cost(&base, &u, &g, &b).unwrap();
        let (cs, rs) = robust_cost(&scaled, &u, &g, &b).unwrap();
        prop_assert!((rs.value - c * rb.value).abs() <= 1e-12 * c * (1.0 + rb.value.abs()));
        prop_assert_eq!(&rs.lambda_star, &rb.lambda_star);
        for (a, z) in cb.per_gamma.iter().zip(&cs.per_gamma) {
            prop_assert!((z.total - c * a.total).abs() <= 1e-12 * c * (1.0 + a.total.abs()));
        }
    }

    #[test]
    fn robust_cost_is_lipschitz(c1 in -1.0f64..1.0, c2 in -1.0f64..1.0) {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = BrownianBundle::generate(g, 2000, 13).unwrap();
        let r = |c: f64| robust_cost(&s, &ControlProcess::constant(vec![c]), &g, &b).unwrap().1.value;
        prop_assert!((r(c1) - r(c2)).abs() <= 2.0 * (c1 - c2).abs());
    }

    #[test]
    fn integral_functional_is_affine_in_lambda(kappa in 0.0f64..1.0) {
        let s = builtin_example_one();
        let g = TimeGrid::new(1.0, 40).unwrap();
        let b = BrownianBundle::generate(g, 300, 15).unwrap();
        let u = ControlProcess::constant(vec![0.4]);
        let refs: Vec<GammaReference> = (0..2)
            .map(|gamma| {
                let state = simulate_state(&s, gamma, &u, &g, &b).unwrap();
                let first = solve_first_adjoint(&s, &state, &b, &AdjointOptions::default()).unwrap();
                let second = solve_second_adjoint(&s, &state, &first, &b, &AdjointOptions::default()).unwrap();
                GammaReference { state, first, second }
            })
            .collect();
        let sops: Vec<_> = refs.iter().map(|r| assemble_s(&s, r, 60_000_000).unwrap()).collect();
        let dirs = [ControlProcess::constant(vec![-0.6]), ControlProcess::constant(vec![1.0])];
        let phi = |l: Vec<f64>| -> Vec<f64> {
            let rep = integral_condition(&s, &refs, &sops, &dirs, &LambdaChoice::Common(l), &b).unwrap();
            rep.entries.iter().map(|e| e.value).collect()
        };
        let (a, z, mix) = (phi(vec![1.0, 0.0]), phi(vec![0.0, 1.0]), phi(vec![kappa, 1.0 - kappa]));
        for i in 0..dirs.len() {
            let lin = kappa * a[i] + (1.0 - kappa) * z[i];
            prop_assert!((mix[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()), "{} vs {lin}", mix[i]);
        }
    }
}

#[test]
fn galerkin_refinement_moves_inner_products_by_the_tail() {
    let f = |x: f64| x * (1.0 - x);
    let h = |x: f64| (x * x * (1.0 - x)).exp() - 1.0;
    let all_f = sine_coefficients(f, 64, 4096);
    let all_h = sine_coefficients(h, 64, 4096);
    let inner = |n: usize| -> f64 { all_f[..n].iter().zip(&all_h[..n]).map(|(a, b)| a * b).sum() };
    let tail = |v: &[f64], n: usize| v[n..].iter().map(|a| a * a).sum::<f64>().sqrt();
    for n in [2, 4, 8, 16] {
        let moved = (inner(2 * n) - inner(n)).abs();
        assert!(moved <= tail(&all_f, n) * tail(&all_h, n) + 1e-15, "N={n}: {moved}");
    }
}

#[test]
fn builtin_uncertainty_models() {
    for s in [builtin_example_one(), example_two(4).0] {
        let m = &s.uncertainty;
        assert_eq!(m.size(), 2);
        assert_eq!((m.distance(0, 1), m.distance(1, 0), m.distance(0, 0)), (1.0, 1.0, 0.0));
        assert!(m.lambda_set.is_full_simplex());
    }
}

#[test]
fn reproducible_across_thread_counts() {
    let (s, u) = example_two(4);
    let g = TimeGrid::new(s.horizon, 50).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let b = BrownianBundle::generate(g, 300, 21).unwrap();
            let x = simulate_state(&s, 0, &u, &g, &b).unwrap();
            let a = solve_first_adjoint(&s, &x, &b, &AdjointOptions::default()).unwrap();
            let costs = cost_breakdown(&s, &u, &g, &b).unwrap();
            (x.x.values().to_vec(), a.p.values().to_vec(), costs.totals())
        })
    };
    let one = run(1);
    for threads in [2, 5] {
        assert!(run(threads) == one, "results differ with {threads} threads");
    }
}

#[test]
fn state_is_adapted() {
    let (s, u) = example_two(4);
    let g = TimeGrid::new(s.horizon, 60).unwrap();
    let b = BrownianBundle::generate(g, 40, 22).unwrap();
    let x = simulate_state(&s, 0, &u, &g, &b).unwrap();
    for from in [0, 17, 59] {
        let r = b.with_future_resampled(from, 99);
        let xr = simulate_state(&s, 0, &u, &g, &r).unwrap();
        for p in 0..40 {
            for k in 0..=from {
                assert_eq!(x.x.at(p, k), xr.x.at(p, k), "path {p} step {k}");
            }
        }
        assert!((0..40).any(|p| x.x.at(p, 60) != xr.x.at(p, 60)));
    }
}

#[test]
fn zero_cost_scenario_has_zero_adjoints() {
    let s = affine_scenario(1.0, false);
    let g = TimeGrid::new(1.0, 30).unwrap();
    let b = BrownianBundle::generate(g, 200, 31).unwrap();
    for gamma in 0..2 {
        let x = simulate_state(&s, gamma, &ControlProcess::constant(vec![0.7]), &g, &b).unwrap();
        let a1 = solve_first_adjoint(&s, &x, &b, &AdjointOptions::default()).unwrap();
        assert!(a1.p.values().iter().chain(a1.q.values()).all(|v| *v == 0.0));
        let a2 = solve_second_adjoint(&s, &x, &a1, &b, &AdjointOptions::default()).unwrap();
        let r = GammaReference { state: x, first: a1, second: a2 };
        assert_eq!(assemble_s(&s, &r, 60_000_000).unwrap().max_abs(), 0.0);
    }
}

#[test]
fn malliavin_field_is_adapted_and_refines() {
    // open-loop control, so the multiplicative noise alone drives D x
    let (s, _) = example_two(3);
    let u = ControlProcess::zero(6);
    let fine = BrownianBundle::generate(TimeGrid::new(s.horizon, 160).unwrap(), 200, 41).unwrap();
    let mut nablas = Vec::new();
    for factor in [4, 2, 1] {
        let b = fine.coarsen(factor).unwrap();
        let g = *b.grid();
        let x = simulate_state(&s, 0, &u, &g, &b).unwrap();
        let f = malliavin_linear_sde(&s, MalliavinSource::State(&x), &b, DEFAULT_BAND_STEPS).unwrap();
        for p in [0, 199] {
            for k in 0..=g.steps() {
                for l in k..=g.steps() {
                    assert!(f.get(p, k, l).is_some_and(<[f64]>::is_empty));
                }
            }
        }
        nablas.push((factor, g.dt(), nabla_approx(&f).unwrap()));
    }
    // mean-square change of ∇x at the shared nodes when dt halves
    let w = s.spaces.weights(SpaceTag::H).to_vec();
    for pair in nablas.windows(2) {
        let ((fc, dt, coarse), (ff, _, finer)) = (&pair[0], &pair[1]);
        let ratio = fc / ff;
        let mut acc = 0.0;
        let mut count = 0;
        for p in 0..coarse.paths() {
            for k in 0..coarse.steps() {
                let (a, z) = (coarse.at(p, k), finer.at(p, k * ratio));
                acc += a.iter().zip(z).zip(&w).map(|((x, y), wi)| (x - y).powi(2) * wi * wi).sum::<f64>();
                count += 1;
            }
        }
        let msd = (acc / count as f64).sqrt();
        let c = msd / dt.sqrt();
        assert!(c < 1.0, "dt {dt}: change {msd:e}, C = {c}");
    }
}

#[test]
fn second_derivative_of_the_robust_cost_matches_the_integral_functional() {
    // J(ū + εδu) − J(ū) = ε²Φ(δu; λ*) + o(ε²) with Φ = −pairing, so J'' = 2Φ
    let s = builtin_example_one();
    let g = TimeGrid::new(1.0, 100).unwrap();
    let b = BrownianBundle::generate(g, 20_000, 51).unwrap();
    let zero = ControlProcess::zero(1);
    let eps = 0.05;
    let j = |c: f64| robust_cost(&s, &ControlProcess::constant(vec![c]), &g, &b).unwrap().1;
    let (jp, j0, jm) = (j(eps), j(0.0), j(-eps));
    let second = (jp.value - 2.0 * j0.value + jm.value) / (eps * eps);
    let refs: Vec<GammaReference> = (0..2)
        .map(|gamma| {
            let state = simulate_state(&s, gamma, &zero, &g, &b).unwrap();
            let first = solve_first_adjoint(&s, &state, &b, &AdjointOptions::default()).unwrap();
            let second = solve_second_adjoint(&s, &state, &first, &b, &AdjointOptions::default()).unwrap();
            GammaReference { state, first, second }
        })
        .collect();
    let sops: Vec<_> = refs.iter().map(|r| assemble_s(&s, r, 60_000_000).unwrap()).collect();
    let rep = integral_condition(
        &s,
        &refs,
        &sops,
        &[ControlProcess::constant(vec![1.0])],
        &LambdaChoice::Common(jp.lambda_star.clone()),
        &b,
    )
    .unwrap();
    let phi = rep.entries[0].value;
    let tol = 4.0 * 2.0 * rep.entries[0].std_err + eps;
    assert!((second - 2.0 * phi).abs() <= tol, "J'' = {second}, 2Phi = {}, tol {tol}", 2.0 * phi);
}

#[test]
fn robust_from_costs_matches_brute_force() {
    let set = LambdaSet::full_simplex();
    let r = robust_from_costs(&set, &[0.5, -0.25, 0.5], 1e-12).unwrap();
    assert_eq!(r.value, 0.5);
    assert_eq!(r.vertex_gap, Some(0.0));
}
