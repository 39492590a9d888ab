//! The verification suite behind the `verify` subcommand: every check lists
//! its measurements, tolerances and verdicts.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::Serialize;
use serde_json::{json, Value};

use crate::exec::Strategy;
use crate::feynman::{
    adjudicate_conventions, caustic_check, closed_propagator, free_limit_reference, magnetic_T, printed_propagator,
    propagator, schrodinger_residual, CausticClass, Convention, MasterProblem, SpatialBox, StepSchedule, TimeSpan,
};
use crate::fredholm::{closed_preimage_f, gram_matrix, indicator_etas, solve_N, verify_preimage};
use crate::gausskernels::{donsker_T, montecarlo_gauss_expectation, FiniteRankKernel};
use crate::operators::MagneticModel;
use crate::report::complex_value;
use crate::spectral::{determinant_closed, determinant_discrete, determinant_product, discrete_spectrum_with};
use crate::testfunctions::random_suite;
use crate::{Result, C64, I};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    Holds,
}

#[derive(Debug, Clone, Serialize)]
pub struct Measurement {
    pub label: String,
    pub value: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub passed: bool,
}

impl Measurement {
    fn at_most(label: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            label: label.into(),
            value,
            relation: Relation::AtMost,
            tolerance,
            passed: value <= tolerance,
        }
    }

    fn at_least(label: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            label: label.into(),
            value,
            relation: Relation::AtLeast,
            tolerance,
            passed: value >= tolerance,
        }
    }

    fn holds(label: impl Into<String>, ok: bool) -> Self {
        Self {
            label: label.into(),
            value: if ok { 1.0 } else { 0.0 },
            relation: Relation::Holds,
            tolerance: 1.0,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub measurements: Vec<Measurement>,
    pub details: Value,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub quick: bool,
    pub checks: Vec<Check>,
    pub passed: usize,
    pub failed: usize,
    pub all_passed: bool,
}

/// Grid sizes used by the suite.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Sizes {
    pub grid: usize,
    pub preimage_grids: [usize; 3],
    pub small_grid: usize,
    pub residual_points: usize,
}

impl Sizes {
    pub fn new(quick: bool) -> Self {
        if quick {
            Self {
                grid: 1000,
                preimage_grids: [250, 500, 1000],
                small_grid: 300,
                residual_points: 3,
            }
        } else {
            Self {
                grid: 2000,
                preimage_grids: [500, 1000, 2000],
                small_grid: 1000,
                residual_points: 5,
            }
        }
    }
}

/// Seed and sample count the suite takes from the run configuration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SuiteInputs {
    pub seed: u64,
    pub samples: usize,
    pub quick: bool,
}

type Outcome = Result<(Vec<Measurement>, Value)>;

fn check(id: u8, name: &'static str, body: impl FnOnce() -> Outcome) -> Check {
    match body() {
        Ok((measurements, details)) => Check {
            id,
            name,
            passed: !measurements.is_empty() && measurements.iter().all(|m| m.passed),
            measurements,
            details,
            error: None,
        },
        Err(e) => Check {
            id,
            name,
            passed: false,
            measurements: Vec::new(),
            details: Value::Null,
            error: Some(e.to_string()),
        },
    }
}

fn model(k: f64, t: f64) -> Result<MagneticModel> {
    MagneticModel::new(k, t)
}

fn simpson(f: impl Fn(f64) -> C64, a: f64, b: f64, intervals: usize) -> C64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + h * i as f64) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * (h / 3.0)
}

fn spectrum(sizes: Sizes) -> Outcome {
    let m = model(1.0, 1.0)?;
    let rep = discrete_spectrum_with(&m, &m.grid(sizes.grid)?, 10, 1e-3)?;
    let worst_rel = rep.matches.iter().map(|x| x.rel_error).fold(0.0, f64::max);
    let worst_pair = rep.matches.iter().map(|x| x.pair_gap).fold(0.0, f64::max);
    Ok((
        vec![
            Measurement::at_least("matched pairs", rep.matches.len() as f64, 10.0),
            Measurement::at_most("max relative eigenvalue error", worst_rel, 1e-3),
            Measurement::at_most("max relative pair gap", worst_pair, 1e-6),
        ],
        json!({ "grid_points": sizes.grid, "analytic": rep.analytic, "match_errors": rep.match_errors }),
    ))
}

fn determinant(sizes: Sizes) -> Outcome {
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for (k, t) in [(1.0, 1.0), (0.5, 2.0), (0.3, 0.7)] {
        let m = model(k, t)?;
        let closed = determinant_closed(&m);
        let discrete = determinant_discrete(&discrete_spectrum_with(&m, &m.grid(sizes.grid)?, 1, 1.0)?);
        let product = determinant_product(&m, 100_000)?;
        out.push(Measurement::at_most(format!("|discrete − cos²| at k={k}, t={t}"), (discrete - closed).abs(), 1e-2));
        out.push(Measurement::at_most(format!("|product − cos²| at k={k}, t={t}"), (product - closed).abs(), 1e-4));
        rows.push(json!({ "k": k, "t": t, "closed": closed, "discrete": discrete, "product": product }));
    }
    Ok((out, json!({ "grid_points": sizes.grid, "product_terms": 100_000, "values": rows })))
}

fn preimage(sizes: Sizes) -> Outcome {
    let m = model(1.0, 1.0)?;
    let residuals = sizes
        .preimage_grids
        .iter()
        .map(|&n| verify_preimage(&m, &m.grid(n)?))
        .collect::<Result<Vec<_>>>()?;
    let orders: Vec<f64> = residuals.windows(2).map(|w| (w[0].f_sup / w[1].f_sup).log2()).collect();
    let g = m.grid(sizes.preimage_grids[2])?;
    let (e1, _) = indicator_etas(&g);
    let solved = solve_N(&m, &g, &e1)?;
    let gap = solved.x.sub(&closed_preimage_f(&m, &g)?)?.sup_norm();
    Ok((
        vec![
            Measurement::at_most("‖N f − (1,0)‖_sup", residuals[2].f_sup, 1e-3),
            Measurement::at_most("‖solve_N((1,0)) − f‖_sup", gap, 1e-3),
            Measurement::at_least("residual order", orders.iter().copied().fold(f64::INFINITY, f64::min), 1.9),
        ],
        json!({ "residuals": residuals, "orders": orders, "solve_residual": solved.residual, "condition": solved.condition }),
    ))
}

fn gram(sizes: Sizes) -> Outcome {
    let m = model(1.0, 1.0)?;
    let expected = I * 1f64.tan();
    // quadrature of the closed first component, independent of the grid machinery
    let tan = 1f64.tan();
    let oracle = simpson(|s| I * ((2.0 * s).cos() + tan * (2.0 * s).sin()), 0.0, 1.0, 2000);
    let g = m.grid(sizes.grid)?;
    let (e1, e2) = indicator_etas(&g);
    let gm = gram_matrix(&m, &g, &[e1, e2])?;
    let e = &gm.entries;
    let re = e.iter().flatten().map(|z| z.re.abs()).fold(0.0, f64::max);
    Ok((
        vec![
            Measurement::at_most("|∫f₁ − i tan 1| (oracle)", (oracle - expected).norm(), 1e-10),
            Measurement::at_most("max |Re M|", re, 1e-8),
            Measurement::at_most("|M₁₂|", e[0][1].norm(), 1e-4),
            Measurement::at_most("|M₁₁ − i tan 1|", (e[0][0] - expected).norm(), 1e-4),
        ],
        json!({ "grid_points": sizes.grid, "entries": e.iter().map(|r| r.iter().map(|&z| complex_value(z)).collect::<Vec<_>>()).collect::<Vec<_>>() }),
    ))
}

fn two_path(sizes: Sizes, seed: u64) -> Outcome {
    let m = model(1.0, 1.0)?;
    let g = m.grid(sizes.grid)?;
    let problem = MasterProblem::magnetic(&m, &g)?;
    let y = [0.3, -0.4];
    let mut out = Vec::new();
    let mut values = Vec::new();
    for (i, f) in random_suite(seed, 5, &g)?.iter().enumerate() {
        let lemma = problem.evaluate(None, &y, f, Convention::Composed)?.value;
        let closed = magnetic_T(&m, y, f, Convention::Composed)?.value;
        out.push(Measurement::at_most(format!("relative gap, test function {i}"), (closed - lemma).norm() / lemma.norm(), 1e-3));
        values.push(json!({ "lemma": complex_value(lemma), "closed": complex_value(closed) }));
    }
    Ok((out, json!({ "grid_points": sizes.grid, "seed": seed, "y": y, "values": values })))
}

fn free_limit(sizes: Sizes) -> Outcome {
    let y = [1.0, 0.0];
    let free = free_limit_reference(1.0, y)?;
    let gaps = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&k| Ok(propagator(&model(k, 1.0)?, y, sizes.small_grid)?.composed_vs_free))
        .collect::<Result<Vec<f64>>>()?;
    Ok((
        vec![
            Measurement::at_most("relative gap at k = 1e-4", gaps[2], 1e-3),
            Measurement::holds("gap decreases over k = 1e-2, 1e-3, 1e-4", gaps[0] > gaps[1] && gaps[1] > gaps[2]),
        ],
        json!({ "free": complex_value(free), "gaps": gaps }),
    ))
}

fn gauss_measure(inputs: SuiteInputs) -> Outcome {
    let k = FiniteRankKernel::new(vec![-0.25])?;
    let a = montecarlo_gauss_expectation(&k, inputs.samples, inputs.seed, Strategy::Parallel)?;
    let b = montecarlo_gauss_expectation(&k, inputs.samples, inputs.seed, Strategy::Sequential)?;
    let same = a.mean.to_bits() == b.mean.to_bits() && a.std_error.to_bits() == b.std_error.to_bits();
    Ok((
        vec![
            Measurement::at_most("|exact − √2|", (a.exact - 2f64.sqrt()).abs(), 1e-15),
            Measurement::at_most("|mean − √2| / standard error", (a.mean - 2f64.sqrt()).abs() / a.std_error, 3.0),
            Measurement::holds("bit-identical rerun", same),
        ],
        serde_json::to_value(a).unwrap_or(Value::Null),
    ))
}

fn donsker() -> Outcome {
    let total = simpson(|x| donsker_T(1.0, C64::new(0.0, 0.0), C64::new(0.0, 0.0), x).unwrap_or(C64::new(f64::NAN, 0.0)), -12.0, 12.0, 4000);
    Ok((vec![Measurement::at_most("|∫ T δ dx − 1|", (total - 1.0).norm(), 1e-6)], json!({ "integral": complex_value(total) })))
}

fn caustics(sizes: Sizes) -> Outcome {
    let a = caustic_check(&model(1.0, PI)?).class == CausticClass::Integer;
    let b = caustic_check(&model(1.0, FRAC_PI_2)?).class == CausticClass::HalfInteger;
    let kts: Vec<f64> = (0..=6).map(|i| 2.8 + 0.05 * i as f64).collect();
    let moduli = kts
        .iter()
        .map(|&kt| Ok(propagator(&model(1.0, kt)?, [0.0, 0.0], sizes.small_grid)?.composed.value.norm()))
        .collect::<Result<Vec<f64>>>()?;
    let monotone = moduli.windows(2).all(|w| w[1] > w[0]);
    let ratio = moduli[6] / moduli[0];
    Ok((
        vec![
            Measurement::holds("kt = π is an integer caustic", a),
            Measurement::holds("kt = π/2 is a half-integer caustic", b),
            Measurement::holds("monotone growth over kt ∈ [2.8, 3.1]", monotone),
            Measurement::at_least("growth factor from kt = 2.8 to 3.1", ratio, 10.0),
        ],
        json!({
            "kt": kts,
            "moduli": moduli,
            "closed_form_ratio": 2.8f64.sin() / 3.1f64.sin(),
        }),
    ))
}

fn residual(sizes: Sizes) -> Outcome {
    let y_box = SpatialBox {
        center: [0.2, -0.1],
        half_width: 0.6,
        points: sizes.residual_points,
    };
    let span = TimeSpan {
        start: 0.5,
        end: 1.0,
        points: 3,
    };
    let steps = StepSchedule::default();
    let free = schrodinger_residual(0.0, &y_box, &span, Convention::Composed, &steps)?;
    let adj = adjudicate_conventions(0.5, &y_box, &span, &steps)?;
    let m = model(0.5, 1.0)?;
    let y = [0.3, -0.4];
    let composed = closed_propagator(&m, y, Convention::Composed)?.value;
    let printed = printed_propagator(&m, y)?;
    let unit = propagator(&model(1.0, 1.0)?, [0.0, 0.0], sizes.small_grid)?;
    Ok((
        vec![
            Measurement::at_least("free residual order", free.min_order, 1.9),
            Measurement::holds("exactly one convention converges at k = 0.5", adj.unique.is_some()),
        ],
        json!({
            "passing_convention": adj.unique.map(|c| c.as_str()),
            "orders": adj.reports.iter().map(|r| json!({ "convention": r.convention, "orders": r.orders, "degenerate": r.degenerate })).collect::<Vec<_>>(),
            "k_0_5": {
                "y": y,
                "composed": complex_value(composed),
                "printed": complex_value(printed),
                "relative_disagreement": (printed - composed).norm() / composed.norm(),
            },
            "k_1_t_1_origin": {
                "composed": complex_value(unit.composed.value),
                "printed": complex_value(unit.printed),
                "relative_disagreement": unit.composed_vs_printed,
            },
        }),
    ))
}

/// Runs every check. A failing check never stops the others.
pub fn run(inputs: SuiteInputs) -> VerifyReport {
    let sizes = Sizes::new(inputs.quick);
    let checks = vec![
        check(1, "spectrum", || spectrum(sizes)),
        check(2, "determinant three-way", || determinant(sizes)),
        check(3, "preimage", || preimage(sizes)),
        check(4, "Gram matrix", || gram(sizes)),
        check(5, "two-path T-transform", || two_path(sizes, inputs.seed)),
        check(6, "free limit", || free_limit(sizes)),
        check(7, "Gauss-measure determinant identity", || gauss_measure(inputs)),
        check(8, "Donsker normalization", donsker),
        check(9, "caustic behaviour", || caustics(sizes)),
        check(10, "Schrödinger residual", || residual(sizes)),
    ];
    let passed = checks.iter().filter(|c| c.passed).count();
    VerifyReport {
        quick: inputs.quick,
        failed: checks.len() - passed,
        all_passed: passed == checks.len(),
        passed,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurement_relations() {
        assert!(Measurement::at_most("a", 1.0, 1.0).passed);
        assert!(!Measurement::at_most("a", f64::NAN, 1.0).passed);
        assert!(!Measurement::at_least("a", 0.5, 1.0).passed);
        assert!(!Measurement::holds("a", false).passed);
    }

    #[test]
    fn errors_fail_the_check() {
        let c = check(0, "x", || Err(crate::Error::invalid("boom")));
        assert!(!c.passed && c.error.as_deref() == Some("invalid parameter: boom"));
        let empty = check(0, "x", || Ok((Vec::new(), Value::Null)));
        assert!(!empty.passed);
    }

    #[test]
    fn cheap_checks_pass() {
        assert!(check(8, "d", donsker).passed);
        let inputs = SuiteInputs {
            seed: 42,
            samples: 100_000,
            quick: true,
        };
        assert!(check(7, "g", || gauss_measure(inputs)).passed);
    }
}
