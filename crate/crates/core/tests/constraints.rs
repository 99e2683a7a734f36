use nalgebra::DVector;
use proptest::prelude::*;
use scpi_core::constraints::{
    ConstraintSpec, ConstraintSystem, Preset, RawBound, RawConstraint, ZERO_WEIGHT_TOL,
};

const TOL: f64 = 1e-9;

fn manual(p: &str, dir: Option<&str>, q: Option<f64>, q2: Option<f64>, lb: &str) -> ConstraintSpec {
    ConstraintSpec::from_options(&RawConstraint {
        name: None,
        p: Some(p.into()),
        dir: dir.map(Into::into),
        q,
        q2,
        lb: Some(RawBound::Text(lb.into())),
    })
    .unwrap()
}

fn with_q(p: Preset, q: f64, q2: f64) -> ConstraintSpec {
    let mut s = ConstraintSpec::preset(p);
    match p {
        Preset::Ols => {}
        Preset::Simplex | Preset::Lasso | Preset::Ridge => s.q = Some(q),
        Preset::L1L2 => {
            s.q = Some(q);
            s.q2 = Some(q2);
        }
    }
    s
}

/// Membership straight from the set definitions, coordinate by coordinate.
fn member_by_definition(p: Preset, w: &[f64], q: f64, q2: f64) -> bool {
    let l1: f64 = w.iter().map(|x| x.abs()).sum();
    let l2: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sum: f64 = w.iter().sum();
    let nonneg = w.iter().all(|x| *x >= -TOL);
    match p {
        Preset::Ols => true,
        Preset::Simplex => nonneg && (sum - q).abs() <= TOL,
        Preset::Lasso => l1 <= q + TOL,
        Preset::Ridge => l2 <= q + TOL,
        Preset::L1L2 => nonneg && (sum - q).abs() <= TOL && l2 <= q2 + TOL,
    }
}

fn preset_strategy() -> impl Strategy<Value = Preset> {
    prop_oneof![
        Just(Preset::Ols),
        Just(Preset::Simplex),
        Just(Preset::Lasso),
        Just(Preset::Ridge),
        Just(Preset::L1L2),
    ]
}

/// Points near the boundaries as well as random ones: simplex-like points
/// hit the equality exactly, scaled copies probe the norm balls.
fn point(j: usize) -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-2.0..2.0f64, j),
        prop::collection::vec(0.0..1.0f64, j).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>().max(1e-12);
            v.iter().map(|x| x / s).collect()
        }),
    ]
}

fn system_member(cs: &ConstraintSystem, w: &[f64], kc: usize) -> bool {
    let mut beta = w.to_vec();
    beta.extend(std::iter::repeat(0.7).take(kc));
    cs.contains(&DVector::from_vec(beta), TOL)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn membership_agrees_with_set_definitions(
        p in preset_strategy(),
        w in (1usize..6).prop_flat_map(point),
        q in 0.2..2.0f64,
        q2 in 0.2..2.0f64,
        kc in 0usize..3,
    ) {
        let cs = with_q(p, q, q2).materialize(w.len(), kc).unwrap();
        // the simplex-like points sum to one; rescale so the equality can hold
        let w: Vec<f64> = if matches!(p, Preset::Simplex | Preset::L1L2) && w.iter().all(|x| *x >= 0.0) {
            w.iter().map(|x| x * q).collect()
        } else {
            w
        };
        prop_assert_eq!(system_member(&cs, &w, kc), member_by_definition(p, &w, q, q2));
    }

    #[test]
    fn presets_match_their_manual_spelling(
        p in preset_strategy(),
        w in (1usize..6).prop_flat_map(point),
        q in 0.2..2.0f64,
        q2 in 0.2..2.0f64,
    ) {
        let by_name = with_q(p, q, q2);
        let spelled = match p {
            Preset::Ols => manual("no norm", None, None, None, "-Inf"),
            Preset::Simplex => manual("L1", Some("=="), Some(q), None, "0"),
            Preset::Lasso => manual("L1", Some("<="), Some(q), None, "-Inf"),
            Preset::Ridge => manual("L2", Some("<="), Some(q), None, "-Inf"),
            Preset::L1L2 => manual("L1-L2", Some("==/<="), Some(q), Some(q2), "0"),
        };
        let a = by_name.materialize(w.len(), 1).unwrap();
        let b = spelled.materialize(w.len(), 1).unwrap();
        let w: Vec<f64> = if w.iter().all(|x| *x >= 0.0) { w.iter().map(|x| x * q).collect() } else { w };
        prop_assert_eq!(system_member(&a, &w, 1), system_member(&b, &w, 1));
    }
}

/// Feasible points of each inequality kind, kept away from the origin and
/// from the kinks of the ℓ1 norm.
fn feasible_point(j: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.05..0.3f64, prop::bool::ANY), j)
        .prop_map(|v| v.into_iter().map(|(x, neg)| if neg { -x } else { x }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradients_match_central_differences(
        p in prop_oneof![Just(Preset::Simplex), Just(Preset::Lasso), Just(Preset::Ridge), Just(Preset::L1L2)],
        w in (1usize..6).prop_flat_map(feasible_point),
    ) {
        let j = w.len();
        let cs = with_q(p, 5.0, 5.0).materialize(j, 1).unwrap();
        let mut beta = w.clone();
        beta.push(0.3);
        let beta = DVector::from_vec(beta);
        let h = 1e-6;
        for k in 0..cs.d_in() {
            let grad = cs.grad_in(k, &beta);
            for i in 0..cs.d {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (cs.m_in(&up)[k] - cs.m_in(&dn)[k]) / (2.0 * h);
                let scale = grad[i].abs().max(1.0);
                prop_assert!((fd - grad[i]).abs() <= 1e-6 * scale, "k {k} i {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }
}

#[test]
fn l1_subgradient_vanishes_on_zero_weights() {
    let cs = with_q(Preset::Lasso, 1.0, 1.0).materialize(3, 0).unwrap();
    let beta = DVector::from_vec(vec![0.5, ZERO_WEIGHT_TOL / 2.0, -0.2]);
    let g = cs.grad_in(0, &beta);
    assert_eq!(g.as_slice(), &[1.0, 0.0, -1.0]);
}
