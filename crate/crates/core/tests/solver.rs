use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scpi_core::constraints::{ConstraintSpec, ConstraintSystem, Preset};
use scpi_core::solver::{solve_linear_over_level_set, solve_wls, LevelSet, Sense, SolveStatus};
use scpi_testkit::oracle::{self, WeightSet};

struct Instance {
    a: DVector<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    spec: ConstraintSpec,
    set: WeightSet,
}

fn instance(preset: Preset, rng: &mut ChaCha8Rng) -> Instance {
    let j = rng.random_range(1..=4);
    let t0 = rng.random_range(j.max(2)..=10);
    let kc = rng.random_range(0..=1usize);
    let b = DMatrix::from_fn(t0, j, |_, _| rng.random_range(0.0..1.0));
    let c = DMatrix::from_element(t0, kc, 1.0);
    let a = DVector::from_fn(t0, |_, _| rng.random_range(0.0..1.0));
    let mut spec = ConstraintSpec::preset(preset);
    let set = match preset {
        Preset::Ols => WeightSet::Free,
        Preset::Simplex => WeightSet::Simplex { total: 1.0 },
        Preset::Lasso => {
            let q = rng.random_range(0.1..1.5);
            spec.q = Some(q);
            WeightSet::L1Ball { radius: q }
        }
        Preset::Ridge => {
            let q = rng.random_range(0.1..1.5);
            spec.q = Some(q);
            WeightSet::L2Ball { radius: q }
        }
        Preset::L1L2 => {
            // the ball must meet the simplex: radius >= 1 / sqrt(J)
            let q2 = rng.random_range(1.0 / (j as f64).sqrt() + 0.02..1.2);
            spec.q = Some(1.0);
            spec.q2 = Some(q2);
            WeightSet::SimplexBall { total: 1.0, radius: q2 }
        }
    };
    Instance { a, b, c, spec, set }
}

#[test]
fn fit_objective_matches_reference_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    for preset in [Preset::Ols, Preset::Simplex, Preset::Lasso, Preset::Ridge, Preset::L1L2] {
        for k in 0..50 {
            let inst = instance(preset, &mut rng);
            let (t0, j) = inst.b.shape();
            let cs = inst.spec.materialize(j, inst.c.ncols()).unwrap();
            let v = DVector::from_element(t0, 1.0);
            let sol = solve_wls(&inst.a, &inst.b, &inst.c, &v, &cs).unwrap();
            let reference = oracle::minimize(&inst.a, &inst.b, &inst.c, inst.set);
            let gap = sol.objective - reference.objective;
            assert!(
                gap.abs() <= 1e-6,
                "{preset:?} #{k}: solver {} vs reference {}",
                sol.objective,
                reference.objective
            );
            assert!(cs.contains(&sol.x, 1e-7), "{preset:?} #{k}: infeasible {}", sol.x);
            assert!(sol.kkt.max() <= 1e-7, "{preset:?} #{k}: kkt {:?}", sol.kkt);
        }
    }
}

fn fit_objective(a: &DVector<f64>, b: &DMatrix<f64>, preset: Preset, q: f64) -> f64 {
    let mut spec = ConstraintSpec::preset(preset);
    spec.q = Some(q);
    let cs = spec.materialize(b.ncols(), 0).unwrap();
    let v = DVector::from_element(a.len(), 1.0);
    solve_wls(a, b, &DMatrix::zeros(a.len(), 0), &v, &cs).unwrap().objective
}

fn problem() -> impl Strategy<Value = (DVector<f64>, DMatrix<f64>)> {
    (1usize..5, 5usize..12).prop_flat_map(|(j, t0)| {
        (
            prop::collection::vec(-1.0..1.0f64, t0).prop_map(DVector::from_vec),
            prop::collection::vec(-1.0..1.0f64, t0 * j).prop_map(move |v| DMatrix::from_vec(t0, j, v)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn larger_q_never_worsens_the_fit(
        (a, b) in problem(),
        preset in prop_oneof![Just(Preset::Lasso), Just(Preset::Ridge)],
        q in 0.05..1.0f64,
        grow in 1.0..3.0f64,
    ) {
        let small = fit_objective(&a, &b, preset, q);
        let large = fit_objective(&a, &b, preset, q * grow);
        prop_assert!(large <= small + 1e-7, "{large} > {small}");
    }

    #[test]
    fn level_set_bounds_bracket_zero(
        d in 1usize..5,
        seed in any::<u64>(),
        preset in prop_oneof![Just(Preset::Ols), Just(Preset::Simplex), Just(Preset::Lasso), Just(Preset::Ridge)],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = DMatrix::from_fn(d + 2, d, |_, _| rng.random_range(-1.0..1.0));
        let q = root.transpose() * &root;
        let g = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mut spec = ConstraintSpec::preset(preset);
        if matches!(preset, Preset::Lasso | Preset::Ridge) {
            spec.q = Some(1.0);
        }
        let mut cs = spec.materialize(d, 0).unwrap();
        // localize at a feasible interior point, as the simulation does
        cs.offset = DVector::from_element(d, 1.0 / d as f64);
        for e in &mut cs.eqs {
            e.rhs = cs.offset.sum() - 1.0;
        }
        let lo = solve_linear_over_level_set(&c, &q, &g, &cs, Sense::Min).unwrap();
        let hi = solve_linear_over_level_set(&c, &q, &g, &cs, Sense::Max).unwrap();
        prop_assert!(lo.objective <= 1e-7 && hi.objective >= -1e-7, "[{}, {}]", lo.objective, hi.objective);
    }
}

#[test]
fn disk_optima_match_closed_form() {
    // Q = I: the level set is the disk |delta - G| <= |G|
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = DMatrix::identity(2, 2);
    let level = LevelSet::new(&q, ConstraintSystem::unconstrained(2, 2));
    let mut ws = level.workspace(&q).unwrap();
    for _ in 0..100 {
        let g = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let c = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let centre = c.dot(&g);
        let reach = c.norm() * g.norm();
        for (sense, expected) in [(Sense::Max, centre + reach), (Sense::Min, centre - reach)] {
            let one_shot = level.solve(&c, &g, sense).unwrap();
            let reused = ws.solve(&c, &g, sense).unwrap();
            assert_eq!(one_shot.status, SolveStatus::Optimal);
            assert!((one_shot.objective - expected).abs() <= 1e-6, "{} vs {expected}", one_shot.objective);
            assert!((reused.objective - expected).abs() <= 1e-6, "{} vs {expected}", reused.objective);
        }
    }
}
