//! Spectrum of `B = L (Id + K)⁻¹` and the Fredholm determinant
//! `det(Id + B) = cos²(kt)`, computed three ways: closed form, truncated
//! infinite product, and the product of `1 + λ` over the discrete spectrum.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use faer::Side;
use serde::Serialize;

use crate::cache::{model_key, KeyedCache};
use crate::grid::{sample, Grid, GridFunctionPair};
use crate::operators::{resolvent_generator, MagneticModel};
use crate::{Error, Result, C64};

/// Default per-pair relative tolerance for eigenvalue matching.
pub const MATCH_TOLERANCE: f64 = 1e-2;

/// Default truncation of the infinite product.
pub const DEFAULT_N_MAX: u64 = 100_000;

/// `λₙ = 2kt / ((2n − 1)π)` for `n = 1..=count`; each has multiplicity 2 and
/// a mirror `−λₙ = λ₁₋ₙ`.
pub fn analytic_eigenvalues(m: &MagneticModel, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::invalid("eigenvalue count must be at least 1"));
    }
    Ok((1..=count as i64).map(|n| analytic_eigenvalue(m, n)).collect())
}

/// `λₙ` for any integer `n`; `n ≤ 0` gives the negative branch.
pub fn analytic_eigenvalue(m: &MagneticModel, n: i64) -> f64 {
    2.0 * m.kt() / ((2 * n - 1) as f64 * PI)
}

/// Samples `c₁(cos ωs, sin ωs) + c₂(sin ωs, −cos ωs)` with `ω = 2k/λₙ`.
pub fn analytic_eigenfunction(
    m: &MagneticModel,
    n: i64,
    c1: C64,
    c2: C64,
    g: &Grid,
) -> Result<GridFunctionPair> {
    if c1 == C64::new(0.0, 0.0) && c2 == C64::new(0.0, 0.0) {
        return Err(Error::invalid("eigenfunction coefficients (c1, c2) are both zero"));
    }
    let lambda = analytic_eigenvalue(m, n);
    if lambda == 0.0 {
        return Err(Error::invalid("k = 0 has no non-vanishing eigenvalues"));
    }
    let omega = eigen_frequency(m, n);
    Ok(sample(
        |s| c1 * (omega * s).cos() + c2 * (omega * s).sin(),
        |s| c1 * (omega * s).sin() - c2 * (omega * s).cos(),
        g,
    ))
}

/// `2k / λₙ = (2n − 1)π / t`.
pub fn eigen_frequency(m: &MagneticModel, n: i64) -> f64 {
    (2 * n - 1) as f64 * PI / m.t()
}

/// One analytic eigenvalue and the four discrete eigenvalues matched to it.
#[derive(Debug, Clone, Serialize)]
pub struct EigenMatch {
    pub index: usize,
    pub analytic: f64,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Largest relative deviation of `|λ|` over the matched group.
    pub rel_error: f64,
    /// Relative gap within each multiplicity-2 pair.
    pub pair_gap: f64,
    /// Relative gap `|λ₊ + λ₋|` between the positive and negative members.
    pub mirror_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub model: MagneticModel,
    pub grid_points: usize,
    pub analytic: Vec<f64>,
    /// Every eigenvalue of the discretized `B`, by descending `|λ|`.
    pub discrete: Vec<f64>,
    pub matches: Vec<EigenMatch>,
    pub match_errors: Vec<f64>,
    pub tolerance: f64,
    pub all_matched: bool,
}

fn spectrum_cache() -> &'static KeyedCache<(u64, u64, usize), Arc<Vec<f64>>> {
    static CACHE: OnceLock<KeyedCache<(u64, u64, usize), Arc<Vec<f64>>>> = OnceLock::new();
    CACHE.get_or_init(|| KeyedCache::new(16))
}

/// Eigenvalues of the discretized `B`, sorted by descending `|λ|`. Cached per
/// (model, grid).
pub fn generator_eigenvalues(m: &MagneticModel, g: &Grid) -> Result<Arc<Vec<f64>>> {
    m.check_grid(g)?;
    spectrum_cache().get_or_try_init(model_key(m.k(), m.t(), g.n()), || {
        let b = resolvent_generator(m, g)?;
        let mut ev = symmetric_eigenvalues(b.as_ref())?;
        sort_by_magnitude(&mut ev);
        Ok(Arc::new(ev))
    })
}

pub(crate) fn symmetric_eigenvalues(b: faer::MatRef<'_, f64>) -> Result<Vec<f64>> {
    let ev = b
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::NumericFailure(format!("symmetric eigensolver failed: {e:?} (dim {})", b.nrows())))?;
    if let Some(bad) = ev.iter().find(|x| !x.is_finite()) {
        return Err(Error::NumericFailure(format!("eigensolver returned {bad}")));
    }
    Ok(ev)
}

fn sort_by_magnitude(ev: &mut [f64]) {
    ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()).then(b.total_cmp(a)));
}

/// Discrete spectrum with the leading 10 analytic values matched.
pub fn discrete_spectrum(m: &MagneticModel, g: &Grid) -> Result<SpectralReport> {
    discrete_spectrum_with(m, g, 10.min(g.n() / 2).max(1), MATCH_TOLERANCE)
}

/// Discrete spectrum with `count` analytic values matched greedily: the
/// `j`-th group of four eigenvalues (by descending `|λ|`) goes to `λⱼ`.
pub fn discrete_spectrum_with(m: &MagneticModel, g: &Grid, count: usize, tolerance: f64) -> Result<SpectralReport> {
    let analytic = analytic_eigenvalues(m, count)?;
    if 4 * count > 2 * g.n() {
        return Err(Error::invalid(format!(
            "cannot match {count} eigenvalue pairs on a grid of {} nodes",
            g.n()
        )));
    }
    let discrete = generator_eigenvalues(m, g)?;
    let matches: Vec<EigenMatch> = analytic
        .iter()
        .enumerate()
        .map(|(j, &lam)| match_group(j + 1, lam, &discrete[4 * j..4 * j + 4]))
        .collect();
    let match_errors: Vec<f64> = matches.iter().map(|mm| mm.rel_error).collect();
    let all_matched = matches.iter().all(|mm| mm.rel_error <= tolerance);
    Ok(SpectralReport {
        model: *m,
        grid_points: g.n(),
        analytic,
        discrete: discrete.as_ref().clone(),
        matches,
        match_errors,
        tolerance,
        all_matched,
    })
}

fn match_group(index: usize, analytic: f64, group: &[f64]) -> EigenMatch {
    let target = analytic.abs();
    let scale = if target > 0.0 { target } else { 1.0 };
    let mut positive: Vec<f64> = group.iter().copied().filter(|&x| x > 0.0).collect();
    let mut negative: Vec<f64> = group.iter().copied().filter(|&x| x <= 0.0).collect();
    positive.sort_by(|a, b| b.total_cmp(a));
    negative.sort_by(|a, b| a.total_cmp(b));
    let rel_error = group.iter().map(|x| (x.abs() - target).abs() / scale).fold(0.0, f64::max);
    let gap = |v: &[f64]| if v.len() == 2 { (v[0] - v[1]).abs() / scale } else { f64::INFINITY };
    let (pair_gap, mirror_gap) = if target == 0.0 {
        (group.iter().map(|x| x.abs()).fold(0.0, f64::max), 0.0)
    } else {
        let mirror = match (positive.first(), negative.first()) {
            (Some(p), Some(q)) => (p + q).abs() / scale,
            _ => f64::INFINITY,
        };
        (gap(&positive).max(gap(&negative)), mirror)
    };
    EigenMatch {
        index,
        analytic,
        positive,
        negative,
        rel_error,
        pair_gap,
        mirror_gap,
    }
}

/// `det(Id + L(Id + K)⁻¹) = cos²(kt)`.
pub fn determinant_closed(m: &MagneticModel) -> f64 {
    m.kt().cos().powi(2)
}

/// `∏_{n ≤ n_max} (1 − 4k²t² / ((2n − 1)²π²))²`.
pub fn determinant_product(m: &MagneticModel, n_max: u64) -> Result<f64> {
    if n_max == 0 {
        return Err(Error::invalid("product truncation n_max must be at least 1"));
    }
    Ok(signed_sqrt_product(m, n_max).powi(2))
}

/// `∏ (1 − λₙ²)`, the continuation of `√det` from `t → 0⁺` (tends to `cos(kt)`).
pub fn signed_sqrt_product(m: &MagneticModel, n_max: u64) -> f64 {
    let x = 2.0 * m.kt() / PI;
    let x2 = x * x;
    (1..=n_max)
        .map(|n| {
            let d = (2 * n - 1) as f64;
            1.0 - x2 / (d * d)
        })
        .product()
}

/// `∏ (1 + λ)` over the whole discrete spectrum.
pub fn determinant_discrete(report: &SpectralReport) -> f64 {
    report.discrete.iter().map(|l| 1.0 + l).product()
}

/// LU determinant of `Id + B`, used as an independent check of the
/// eigenvalue route.
pub fn determinant_lu(m: &MagneticModel, g: &Grid) -> Result<f64> {
    let mut b = resolvent_generator(m, g)?;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    let d = b.determinant();
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::NumericFailure(format!("LU determinant is {d}")))
    }
}

/// `∏ √(1 + λ)` with the principal root per eigenvalue, evaluated as
/// `exp(½ Σ log(1 + λ))`. For the magnetic spectrum each negative factor
/// occurs twice, so the result is the signed `∏ (1 − σ²)` that continues
/// `√det` from `t → 0⁺`.
pub fn principal_sqrt_determinant(eigenvalues: impl IntoIterator<Item = C64>) -> Result<BranchedSqrt> {
    let mut log_sum = C64::new(0.0, 0.0);
    let mut negative = 0usize;
    let mut smallest = f64::INFINITY;
    for lam in eigenvalues {
        let z = C64::new(1.0, 0.0) + lam;
        smallest = smallest.min(z.norm());
        if z.norm() == 0.0 {
            return Err(Error::SingularFactor("1 + λ = 0 in det(Id + L(Id + K)⁻¹)".into()));
        }
        if z.re < 0.0 {
            negative += 1;
        }
        log_sum += z.ln();
    }
    Ok(BranchedSqrt {
        value: (log_sum * 0.5).exp(),
        negative_factors: negative,
        smallest_factor: smallest,
    })
}

/// A square root together with the branch bookkeeping that produced it.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BranchedSqrt {
    #[serde(with = "crate::report::complex")]
    pub value: C64,
    /// Number of factors `1 + λ` with negative real part.
    pub negative_factors: usize,
    pub smallest_factor: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Discrepancies {
    pub discrete_vs_closed: f64,
    pub product_vs_closed: f64,
    pub discrete_vs_product: f64,
    pub lu_vs_discrete: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeterminantReport {
    pub model: MagneticModel,
    pub grid_points: usize,
    pub closed: f64,
    pub product: f64,
    pub product_terms: u64,
    pub discrete: f64,
    pub lu: f64,
    /// Absolute differences between the routes.
    pub discrepancies: Discrepancies,
    /// `cos(kt)` is within the caustic guard of zero.
    pub caustic: bool,
}

/// Three-way determinant comparison, plus the LU cross-check.
pub fn determinant_report(m: &MagneticModel, g: &Grid, n_max: u64) -> Result<DeterminantReport> {
    let closed = determinant_closed(m);
    let product = determinant_product(m, n_max)?;
    let spectrum = discrete_spectrum_with(m, g, 1, MATCH_TOLERANCE)?;
    let discrete = determinant_discrete(&spectrum);
    let lu = determinant_lu(m, g)?;
    Ok(DeterminantReport {
        model: *m,
        grid_points: g.n(),
        closed,
        product,
        product_terms: n_max,
        discrete,
        lu,
        discrepancies: Discrepancies {
            discrete_vs_closed: (discrete - closed).abs(),
            product_vs_closed: (product - closed).abs(),
            discrete_vs_product: (discrete - product).abs(),
            lu_vs_discrete: (lu - discrete).abs(),
        },
        caustic: m.kt().cos().abs() < crate::fredholm::CAUSTIC_GUARD,
    })
}
