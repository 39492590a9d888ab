//! Cross-module properties of the numeric pipeline.

use hida_lab::exec::{map_slice, Strategy};
use hida_lab::feynman::{caustic_check, closed_propagator, magnetic_T, CausticClass, Convention, MasterProblem};
use hida_lab::fredholm::{apply_N, resolvent_ode_solve, solve_N};
use hida_lab::operators::{build_N, potential_form_direct, quadratic_form};
use hida_lab::testfunctions::random_suite;
use hida_lab::{pair, sample, MagneticModel, C64};
use proptest::prelude::*;

fn regular(k: f64, t: f64) -> Option<MagneticModel> {
    let m = MagneticModel::new(k, t).ok()?;
    // keep well away from caustics so the conditioning stays moderate
    (caustic_check(&m).class == CausticClass::Regular && caustic_check(&m).distance > 0.05).then_some(m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solve_inverts_n(k in -2.0f64..2.0, t in 0.2f64..2.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        prop_assume!(regular(k, t).is_some());
        let m = regular(k, t).unwrap();
        let g = m.grid(40).unwrap();
        let rhs = sample(|s| C64::new(a * s, b), |s| C64::new(0.0, (a - b) * s * s), &g);
        let x = solve_N(&m, &g, &rhs).unwrap().x;
        let back = apply_N(&m, &x).unwrap();
        prop_assert!(back.sub(&rhs).unwrap().sup_norm() <= 1e-10 * rhs.sup_norm().max(1e-300));
        // the ODE resolvent solves the continuous equation; close on a fine grid
        let ode = resolvent_ode_solve(&m, &g, &rhs).unwrap();
        prop_assert!(ode.sub(&x).unwrap().sup_norm() <= 0.05 * x.sup_norm().max(1e-12));
    }

    #[test]
    fn potential_form_matches_operator_form(k in -2.0f64..2.0, t in 0.2f64..2.0, seed in 0u64..1000) {
        let m = MagneticModel::new(k, t).unwrap();
        let g = m.grid(30).unwrap();
        let f = random_suite(seed, 1, &g).unwrap().remove(0);
        let l = hida_lab::operators::magnetic_L(&m, &g).unwrap();
        let direct = potential_form_direct(&m, &f).unwrap();
        let op = 0.5 * quadratic_form(&l, &f).unwrap();
        prop_assert!((direct - op).norm() <= 1e-12 * (1.0 + op.norm()));
    }

    #[test]
    fn reports_recompose(k in -1.5f64..1.5, t in 0.3f64..1.5, y1 in -1.0f64..1.0, y2 in -1.0f64..1.0, seed in 0u64..100) {
        prop_assume!(regular(k, t).is_some());
        let m = regular(k, t).unwrap();
        let g = m.grid(60).unwrap();
        let f = random_suite(seed, 1, &g).unwrap().remove(0);
        for conv in Convention::ALL {
            let r = magnetic_T(&m, [y1, y2], &f, conv).unwrap();
            prop_assert!((r.recomposed() - r.value).norm() <= 1e-12 * r.value.norm());
        }
        // |G| does not depend on y when M is purely imaginary
        let a = closed_propagator(&m, [0.0, 0.0], Convention::Composed).unwrap().value.norm();
        let b = closed_propagator(&m, [y1, y2], Convention::Composed).unwrap().value.norm();
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }
}

#[test]
fn n_is_symmetric_under_the_bilinear_pairing() {
    let m = MagneticModel::new(0.7, 1.3).unwrap();
    let g = m.grid(50).unwrap();
    let n = build_N(&m, &g).unwrap();
    let fs = random_suite(11, 2, &g).unwrap();
    let a = pair(&fs[0], &n.apply(&fs[1]).unwrap()).unwrap();
    let b = pair(&fs[1], &n.apply(&fs[0]).unwrap()).unwrap();
    assert!((a - b).norm() < 1e-13);
}

#[test]
fn batch_strategies_agree_bitwise() {
    let m = MagneticModel::new(1.0, 1.0).unwrap();
    let g = m.grid(120).unwrap();
    let p = MasterProblem::magnetic(&m, &g).unwrap();
    let fs = random_suite(3, 6, &g).unwrap();
    let eval = |f: &hida_lab::GridFunctionPair| p.evaluate(None, &[0.1, 0.2], f, Convention::Composed).unwrap().value;
    let a = map_slice(Strategy::Sequential, &fs, eval);
    let b = map_slice(Strategy::Parallel, &fs, eval);
    assert_eq!(a, b);
}
