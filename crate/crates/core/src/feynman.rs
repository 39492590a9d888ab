//! Composition of the master `T`-transform, the magnetic `T`-transform and
//! propagator, caustic classification, and the Schrödinger-residual check.
//!
//! For ingredients `det(Id + L(Id + K)⁻¹)`, the Gram matrix `M = (ηᵢ, N⁻¹ηⱼ)`
//! and `φ = f + g`,
//!
//! ```text
//! T(f) = det(Id + L(Id + K)⁻¹)^{−1/2} · ((2π)^J det M)^{−1/2}
//!        · exp(−½ (φ, N⁻¹ φ)) · exp(+½ uᵀ M⁻¹ u),   uⱼ = i yⱼ + (ηⱼ, N⁻¹ φ).
//! ```
//!
//! The `+` in the last exponent is what the Donsker-delta integral produces;
//! with it, `K = L = 0, J = 1` reduces to Donsker's delta and the magnetic
//! propagator reduces to the free one as `k → 0`. The variant with `−½` is
//! kept as [`Convention::LemmaAsPrinted`] for negative controls.
//!
//! Square roots are products of principal roots over eigenvalues: for the
//! determinant, `exp(½ Σ Log(1 + λ))`, for the Gram factor `∏ √(2π μⱼ)`. For
//! the magnetic model the eigenvalues of `L(Id + K)⁻¹` come in equal pairs,
//! so every factor `1 + λ < 0` appears twice and the product is the signed
//! `∏ (1 − λₙ²) → cos(kt)`, the continuation from `t → 0⁺`.
//!
//! # Hamiltonian for the residual check
//!
//! With `ħ = m = 1` the planar Lagrangian is
//! `L = ½|ẋ|² + k (x₁ẋ₂ − ẋ₁x₂) = ½|ẋ|² + 2k A·ẋ`, `A = ½(−x₂, x₁)`.
//! The canonical momentum is `p = ẋ + k(−x₂, x₁)`, and the Legendre transform gives
//!
//! ```text
//! H = ½ |p − k(−x₂, x₁)|² = ½|p|² − k (x₁p₂ − x₂p₁) + ½ k² |x|²
//!   = −½Δ − k L_z + ½ k² |x|²,   L_z = −i (x₁∂₂ − x₂∂₁),
//! ```
//!
//! using `∇·(−x₂, x₁) = 0` to order the operator products. The propagator from
//! the origin is rotation invariant, so `L_z G = 0` and the check does not
//! see the sign of the `L_z` term. For `G = c(t) exp(iα(t)|y|²)` the equation
//! `i∂ₜG = HG` reduces to `c'/c = −2α` and `α' = −2α² − ½k²`, solved by
//! `α = (k/2) cot kt`, `c ∝ 1/sin kt`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::fredholm::{
    analytic_gram_diagonal, closed_preimage_f, closed_preimage_g, indicator_etas, magnetic_resolvent,
    resolvent_ode_solve, DenseSolver, GramMatrix,
};
use crate::grid::{pair, Grid, GridFunctionPair};
use crate::operators::{BlockOperator, MagneticModel};
use crate::spectral::{generator_eigenvalues, principal_sqrt_determinant, symmetric_eigenvalues, BranchedSqrt};
use crate::{Error, Result, C64, I};

/// `|kt − nπ/2| <` this flags a caustic.
pub const CAUSTIC_TOLERANCE: f64 = 1e-8;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CausticClass {
    #[serde(rename = "regular")]
    Regular,
    /// `kt/π ∈ ℤ \ {0}`: the Gram factor degenerates.
    #[serde(rename = "integer_caustic")]
    Integer,
    /// `kt/π − ½ ∈ ℤ`: the determinant vanishes.
    #[serde(rename = "half_integer_caustic")]
    HalfInteger,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CausticReport {
    pub kt: f64,
    pub class: CausticClass,
    /// The nearest `nπ/2`, `n ≠ 0`.
    pub nearest: f64,
    pub distance: f64,
}

/// Classifies `kt` against the excluded set `{nπ/2 : n ≠ 0}`. `k = 0` is the
/// free particle and is regular.
pub fn caustic_check(m: &MagneticModel) -> CausticReport {
    let kt = m.kt();
    let mut n = (kt / FRAC_PI_2).round();
    if n == 0.0 {
        n = if kt < 0.0 { -1.0 } else { 1.0 };
    }
    let nearest = n * FRAC_PI_2;
    let distance = (kt - nearest).abs();
    let class = if distance >= CAUSTIC_TOLERANCE {
        CausticClass::Regular
    } else if (n as i64) % 2 == 0 {
        CausticClass::Integer
    } else {
        CausticClass::HalfInteger
    };
    CausticReport {
        kt,
        class,
        nearest,
        distance,
    }
}

/// [`caustic_check`], turned into an error for non-regular times.
pub fn ensure_regular(m: &MagneticModel) -> Result<CausticReport> {
    let r = caustic_check(m);
    if r.class == CausticClass::Regular {
        Ok(r)
    } else {
        Err(Error::Caustic {
            kt: r.kt,
            class: r.class,
            distance: r.distance,
        })
    }
}

/// Trigonometric and sign normalization of the propagator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Lemma ingredients composed with the `+½uᵀM⁻¹u` exponent.
    #[default]
    Composed,
    /// Closed formulas with prefactor `k / (2πi cos kt)`, for comparison only.
    Printed,
    /// Composition with a `−½uᵀM⁻¹u` exponent.
    #[serde(rename = "lemma-printed")]
    LemmaAsPrinted,
}

impl Convention {
    pub const ALL: [Convention; 3] = [Convention::Composed, Convention::Printed, Convention::LemmaAsPrinted];

    pub fn as_str(self) -> &'static str {
        match self {
            Convention::Composed => "composed",
            Convention::Printed => "printed",
            Convention::LemmaAsPrinted => "lemma-printed",
        }
    }

    /// Coefficient of `uᵀM⁻¹u` in the exponent.
    pub fn delta_sign(self) -> f64 {
        match self {
            Convention::LemmaAsPrinted => -0.5,
            _ => 0.5,
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "composed" => Ok(Convention::Composed),
            "printed" => Ok(Convention::Printed),
            "lemma-printed" => Ok(Convention::LemmaAsPrinted),
            other => Err(Error::Config(format!(
                "unknown convention `{other}` (expected composed, printed or lemma-printed)"
            ))),
        }
    }
}

/// Which inputs produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Dense numerics: eigenvalues, LU resolvent, quadrature Gram matrix.
    Lemma,
    /// Closed forms: `cos kt`, `(i/k) tan kt`, the ODE resolvent.
    Closed,
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchNote {
    #[serde(with = "crate::report::complex")]
    pub det_sqrt: C64,
    /// Number of factors `1 + λ` with negative real part.
    pub det_negative_factors: usize,
    #[serde(with = "crate::report::complex_vec")]
    pub gram_eigenvalues: Vec<C64>,
    #[serde(with = "crate::report::complex")]
    pub gram_sqrt: C64,
    /// Which alternative of the Gram-matrix hypothesis holds.
    pub gram_condition: GramCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GramCondition {
    /// `J = 0`, no delta factors.
    Empty,
    /// `Re M = 0`, `Im M ≠ 0`.
    Imaginary,
    /// `Re M > 0`.
    PositiveReal,
}

#[derive(Debug, Clone, Serialize)]
pub struct TTransformReport {
    #[serde(with = "crate::report::complex")]
    pub value: C64,
    /// `det(Id + L(Id + K)⁻¹)^{−1/2}`.
    #[serde(with = "crate::report::complex")]
    pub det_factor: C64,
    /// `((2π)^J det M)^{−1/2}`.
    #[serde(with = "crate::report::complex")]
    pub gram_factor: C64,
    /// `−½(φ, N⁻¹φ)`.
    #[serde(with = "crate::report::complex")]
    pub exponent_quadratic: C64,
    /// `±½ uᵀ M⁻¹ u` (sign per convention).
    #[serde(with = "crate::report::complex")]
    pub exponent_delta: C64,
    #[serde(with = "crate::report::complex_vec")]
    pub u: Vec<C64>,
    #[serde(with = "crate::report::complex_matrix")]
    pub gram: Vec<Vec<C64>>,
    pub branch: BranchNote,
    pub convention: Convention,
    pub route: Route,
}

impl TTransformReport {
    /// `det_factor · gram_factor · exp(exponent_quadratic + exponent_delta)`.
    pub fn recomposed(&self) -> C64 {
        self.det_factor * self.gram_factor * (self.exponent_quadratic + self.exponent_delta).exp()
    }
}

fn to_mat(m: &[Vec<C64>]) -> Mat<C64> {
    Mat::from_fn(m.len(), m.len(), |i, j| m[i][j])
}

/// Checks "Re M > 0, or Re M = 0 and Im M ≠ 0" (with `M` nonsingular).
/// `Re M = 0` means `max |Re Mᵢⱼ| ≤ 1e−8 max |Mᵢⱼ|`.
pub fn check_lemma_condition(m: &[Vec<C64>]) -> Result<GramCondition> {
    if m.is_empty() {
        return Ok(GramCondition::Empty);
    }
    if m.iter().any(|row| row.len() != m.len()) {
        return Err(Error::invalid("Gram matrix must be square"));
    }
    let size = m.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
    if !(size > 0.0 && size.is_finite()) {
        return Err(Error::ConditionViolation(format!("Gram matrix has max entry {size}")));
    }
    let re = m.iter().flatten().map(|z| z.re.abs()).fold(0.0, f64::max);
    if re <= 1e-8 * size {
        let mu = to_mat(m)
            .eigenvalues()
            .map_err(|e| Error::NumericFailure(format!("Gram eigenvalues: {e:?}")))?;
        let smallest = mu.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
        if smallest <= 1e-12 * size {
            return Err(Error::ConditionViolation(format!(
                "Re M = 0 but M is singular (smallest |eigenvalue| {smallest:.3e})"
            )));
        }
        return Ok(GramCondition::Imaginary);
    }
    let sym = Mat::from_fn(m.len(), m.len(), |i, j| 0.5 * (m[i][j].re + m[j][i].re));
    let ev = symmetric_eigenvalues(sym.as_ref())?;
    if ev.iter().all(|&x| x > 0.0) {
        Ok(GramCondition::PositiveReal)
    } else {
        Err(Error::ConditionViolation(format!(
            "Re M is neither zero nor positive definite (eigenvalues {ev:?})"
        )))
    }
}

/// Assembles the master formula from its ingredients.
pub fn compose_master(
    det_sqrt: BranchedSqrt,
    gram: &[Vec<C64>],
    quadratic: C64,
    projections: &[C64],
    ys: &[f64],
    convention: Convention,
    route: Route,
) -> Result<TTransformReport> {
    if convention == Convention::Printed {
        return Err(Error::invalid("the printed convention exists only for the magnetic model"));
    }
    let j = gram.len();
    if projections.len() != j || ys.len() != j {
        return Err(Error::invalid(format!(
            "Gram matrix is {j}×{j} but {} projections and {} endpoints were given",
            projections.len(),
            ys.len()
        )));
    }
    if det_sqrt.value.norm() < 1e-300 || !det_sqrt.value.is_finite() {
        return Err(Error::SingularFactor(format!(
            "√det(Id + L(Id + K)⁻¹) = {}",
            det_sqrt.value
        )));
    }
    let condition = check_lemma_condition(gram)?;
    let u: Vec<C64> = ys.iter().zip(projections).map(|(&y, &p)| I * y + p).collect();
    let (gram_sqrt, eigenvalues, delta) = if j == 0 {
        (ONE, Vec::new(), ZERO)
    } else {
        let mm = to_mat(gram);
        let mu = mm
            .eigenvalues()
            .map_err(|e| Error::NumericFailure(format!("Gram eigenvalues: {e:?}")))?;
        let root: C64 = mu.iter().map(|&x| (x * (2.0 * PI)).sqrt()).product();
        let inv = mm.partial_piv_lu().inverse();
        let mut q = ZERO;
        for a in 0..j {
            for b in 0..j {
                q += u[a] * inv[(a, b)] * u[b];
            }
        }
        if !q.is_finite() {
            return Err(Error::NumericFailure("uᵀM⁻¹u is not finite".into()));
        }
        (root, mu, q * convention.delta_sign())
    };
    let det_factor = ONE / det_sqrt.value;
    let gram_factor = ONE / gram_sqrt;
    let exponent_quadratic = -0.5 * quadratic;
    let value = det_factor * gram_factor * (exponent_quadratic + delta).exp();
    Ok(TTransformReport {
        value,
        det_factor,
        gram_factor,
        exponent_quadratic,
        exponent_delta: delta,
        u,
        gram: gram.to_vec(),
        branch: BranchNote {
            det_sqrt: det_sqrt.value,
            det_negative_factors: det_sqrt.negative_factors,
            gram_eigenvalues: eigenvalues,
            gram_sqrt,
            gram_condition: condition,
        },
        convention,
        route,
    })
}

/// Numerical ingredients of the master formula for fixed `K`, `L` and `η`s,
/// reusable across test functions.
pub struct MasterProblem {
    grid: Grid,
    kinv: BlockOperator,
    solver: Option<Arc<DenseSolver>>,
    det_sqrt: BranchedSqrt,
    etas: Vec<GridFunctionPair>,
    gram: GramMatrix,
}

impl MasterProblem {
    /// Factorizes `Id + C`, `C = L(Id + K)⁻¹`, and computes its spectrum and
    /// the Gram matrix of `etas`.
    pub fn new(k_op: &BlockOperator, l_op: &BlockOperator, etas: &[GridFunctionPair]) -> Result<Self> {
        let grid = k_op.grid().clone();
        grid.ensure_same(l_op.grid())?;
        for e in etas {
            grid.ensure_same(e.grid())?;
        }
        let kinv = BlockOperator::identity(&grid).add(k_op)?.inverse()?;
        let c = l_op.mul(&kinv)?;
        let (solver, eigenvalues) = if c.is_zero() {
            (None, Vec::new())
        } else if let Some(mut real) = c.as_real_dense(1e-13) {
            let symmetric = (0..real.nrows()).all(|i| (0..i).all(|j| real[(i, j)] == real[(j, i)]));
            let ev: Vec<C64> = if symmetric {
                symmetric_eigenvalues(real.as_ref())?.into_iter().map(|x| C64::new(x, 0.0)).collect()
            } else {
                real.eigenvalues()
                    .map_err(|e| Error::NumericFailure(format!("eigensolver failed: {e:?}")))?
            };
            for i in 0..real.nrows() {
                real[(i, i)] += 1.0;
            }
            (Some(Arc::new(DenseSolver::real(real)?)), ev)
        } else {
            let mut dense = c.to_dense();
            let ev = dense
                .eigenvalues()
                .map_err(|e| Error::NumericFailure(format!("eigensolver failed: {e:?}")))?;
            for i in 0..dense.nrows() {
                dense[(i, i)] += ONE;
            }
            (Some(Arc::new(DenseSolver::complex(dense)?)), ev)
        };
        let det_sqrt = principal_sqrt_determinant(eigenvalues)?;
        Self::finish(grid, kinv, solver, det_sqrt, etas)
    }

    /// The magnetic `K`, `L` with `η = (1, 0), (0, 1)`, sharing the cached
    /// spectrum and LU factorization of `Id + B`.
    pub fn magnetic(m: &MagneticModel, g: &Grid) -> Result<Self> {
        m.check_grid(g)?;
        ensure_regular(m)?;
        let kinv = BlockOperator::scaled_identity(g, I);
        let (e1, e2) = indicator_etas(g);
        if m.k() == 0.0 {
            return Self::finish(g.clone(), kinv, None, principal_sqrt_determinant([])?, &[e1, e2]);
        }
        let ev = generator_eigenvalues(m, g)?;
        let det_sqrt = principal_sqrt_determinant(ev.iter().map(|&x| C64::new(x, 0.0)))?;
        let solver = magnetic_resolvent(m, g)?;
        Self::finish(g.clone(), kinv, Some(solver), det_sqrt, &[e1, e2])
    }

    fn finish(
        grid: Grid,
        kinv: BlockOperator,
        solver: Option<Arc<DenseSolver>>,
        det_sqrt: BranchedSqrt,
        etas: &[GridFunctionPair],
    ) -> Result<Self> {
        let condition = match &solver {
            Some(s) => {
                s.ensure_conditioned("Id + L(Id + K)⁻¹")?;
                s.condition()
            }
            None => 1.0,
        };
        let mut p = Self {
            grid,
            kinv,
            solver,
            det_sqrt,
            etas: etas.to_vec(),
            gram: GramMatrix::from_entries(Vec::new(), Vec::new(), condition, 0.0),
        };
        if let Some(j) = etas.iter().position(|e| e.is_zero()) {
            return Err(Error::invalid(format!("η{} is identically zero", j + 1)));
        }
        let mut residual = 0.0f64;
        let mut solved = Vec::with_capacity(etas.len());
        for e in etas {
            let (x, r) = p.apply_inverse_with_residual(e)?;
            residual = residual.max(r);
            solved.push(x);
        }
        let mut entries = vec![vec![ZERO; etas.len()]; etas.len()];
        for (i, ei) in etas.iter().enumerate() {
            for (j, xj) in solved.iter().enumerate() {
                entries[i][j] = pair(ei, xj)?;
            }
        }
        p.gram = GramMatrix::from_entries(entries, etas.to_vec(), condition, residual);
        Ok(p)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn gram(&self) -> &GramMatrix {
        &self.gram
    }

    pub fn det_sqrt(&self) -> BranchedSqrt {
        self.det_sqrt
    }

    /// `N⁻¹ v = (Id + K)⁻¹ (Id + C)⁻¹ v`.
    pub fn apply_inverse(&self, v: &GridFunctionPair) -> Result<GridFunctionPair> {
        Ok(self.apply_inverse_with_residual(v)?.0)
    }

    fn apply_inverse_with_residual(&self, v: &GridFunctionPair) -> Result<(GridFunctionPair, f64)> {
        self.grid.ensure_same(v.grid())?;
        let (y, residual) = match &self.solver {
            None => (v.clone(), 0.0),
            Some(s) => {
                let r = s.solve(&v.stacked())?;
                (GridFunctionPair::from_stacked(&self.grid, &r.x)?, r.residual)
            }
        };
        Ok((self.kinv.apply(&y)?, residual))
    }

    /// The master formula at `f` with shift `g` and endpoints `ys`.
    pub fn evaluate(
        &self,
        g_fn: Option<&GridFunctionPair>,
        ys: &[f64],
        f: &GridFunctionPair,
        convention: Convention,
    ) -> Result<TTransformReport> {
        let phi = match g_fn {
            Some(g) => f.add(g)?,
            None => f.clone(),
        };
        let x = self.apply_inverse(&phi)?;
        let quadratic = pair(&phi, &x)?;
        let projections = self.etas.iter().map(|e| pair(e, &x)).collect::<Result<Vec<_>>>()?;
        compose_master(
            self.det_sqrt,
            &self.gram.entries,
            quadratic,
            &projections,
            ys,
            convention,
            Route::Lemma,
        )
    }
}

/// Evaluates the master formula with every ingredient computed numerically.
#[allow(non_snake_case)]
pub fn lemma_T(
    k_op: &BlockOperator,
    l_op: &BlockOperator,
    g_fn: Option<&GridFunctionPair>,
    etas: &[GridFunctionPair],
    ys: &[f64],
    f: &GridFunctionPair,
) -> Result<TTransformReport> {
    MasterProblem::new(k_op, l_op, etas)?.evaluate(g_fn, ys, f, Convention::Composed)
}

/// `√det` continued from `t → 0⁺`: `cos kt`, with branch bookkeeping.
fn closed_det_sqrt(m: &MagneticModel) -> BranchedSqrt {
    let x = 2.0 * m.kt().abs() / PI;
    // λₙ = x / (2n − 1) exceeds 1 for n < (x + 1)/2
    let above = (1..).take_while(|&n: &u64| x / (2 * n - 1) as f64 > 1.0).count();
    let near = ((x + 1.0) / 2.0).round().max(1.0) as u64;
    let smallest = [near.saturating_sub(1).max(1), near, near + 1]
        .iter()
        .map(|&n| (1.0 - x / (2 * n - 1) as f64).abs())
        .fold(f64::INFINITY, f64::min);
    BranchedSqrt {
        value: C64::new(m.kt().cos(), 0.0),
        negative_factors: 2 * above,
        smallest_factor: smallest,
    }
}

/// `k cot(kt)`, with its `k → 0` limit `1/t`.
fn k_cot(m: &MagneticModel) -> f64 {
    if m.k() == 0.0 {
        1.0 / m.t()
    } else {
        m.k() / m.kt().tan()
    }
}

fn closed_compose(
    m: &MagneticModel,
    y: [f64; 2],
    quadratic: C64,
    projections: [C64; 2],
    convention: Convention,
) -> Result<TTransformReport> {
    ensure_regular(m)?;
    let d = analytic_gram_diagonal(m)?;
    let gram = vec![vec![d, ZERO], vec![ZERO, d]];
    if convention != Convention::Printed {
        return compose_master(closed_det_sqrt(m), &gram, quadratic, &projections, &y, convention, Route::Closed);
    }
    // k/(2πi) · 1/cos(kt) · exp(−½(φ,N⁻¹φ)) · exp(−(ik/2) cot(kt) Σ uⱼ²)
    let u: Vec<C64> = y.iter().zip(&projections).map(|(&yj, &p)| I * yj + p).collect();
    let det_factor = C64::new(1.0 / m.kt().cos(), 0.0);
    let gram_factor = m.k() / (2.0 * PI * I);
    let exponent_quadratic = -0.5 * quadratic;
    let exponent_delta = -0.5 * I * k_cot(m) * u.iter().map(|z| z * z).sum::<C64>();
    let value = det_factor * gram_factor * (exponent_quadratic + exponent_delta).exp();
    Ok(TTransformReport {
        value,
        det_factor,
        gram_factor,
        exponent_quadratic,
        exponent_delta,
        u,
        gram,
        branch: BranchNote {
            det_sqrt: C64::new(m.kt().cos(), 0.0),
            det_negative_factors: 0,
            gram_eigenvalues: vec![d, d],
            gram_sqrt: ONE / gram_factor,
            gram_condition: GramCondition::Imaginary,
        },
        convention,
        route: Route::Closed,
    })
}

/// Magnetic `T`-transform from closed forms: `cos kt`, `M = (i/k) tan(kt) Id`,
/// the closed preimages `f`, `g`, and `(φ, N⁻¹φ)` from the ODE resolvent, with
/// `uⱼ = i yⱼ + ½(1, (N⁻¹φ)ⱼ) + ½(φ, f or g)`, equal to `(ηⱼ, N⁻¹φ)` by symmetry of `N⁻¹`.
#[allow(non_snake_case)]
pub fn magnetic_T(m: &MagneticModel, y: [f64; 2], phi: &GridFunctionPair, convention: Convention) -> Result<TTransformReport> {
    let g = phi.grid();
    m.check_grid(g)?;
    ensure_regular(m)?;
    let x = if phi.is_zero() {
        GridFunctionPair::zeros(g)
    } else {
        resolvent_ode_solve(m, g, phi)?
    };
    let quadratic = pair(phi, &x)?;
    let (e1, e2) = indicator_etas(g);
    let fp = closed_preimage_f(m, g)?;
    let gp = closed_preimage_g(m, g)?;
    let projections = [
        0.5 * pair(&e1, &x)? + 0.5 * pair(phi, &fp)?,
        0.5 * pair(&e2, &x)? + 0.5 * pair(phi, &gp)?,
    ];
    closed_compose(m, y, quadratic, projections, convention)
}

/// Closed-form generalized expectation (`φ = 0`) without a grid.
pub fn closed_propagator(m: &MagneticModel, y: [f64; 2], convention: Convention) -> Result<TTransformReport> {
    closed_compose(m, y, ZERO, [ZERO, ZERO], convention)
}

/// The printed propagator `k/(2πi cos kt) · exp((ik/2) cot(kt) |y|²)`.
pub fn printed_propagator(m: &MagneticModel, y: [f64; 2]) -> Result<C64> {
    ensure_regular(m)?;
    let r2 = y[0] * y[0] + y[1] * y[1];
    Ok(m.k() / (2.0 * PI * I * m.kt().cos()) * (0.5 * I * k_cot(m) * r2).exp())
}

/// Free planar propagator `1/(2πit) · exp(i|y|²/(2t))`.
pub fn free_limit_reference(t: f64, y: [f64; 2]) -> Result<C64> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid(format!("duration t must be positive, got {t}")));
    }
    let r2 = y[0] * y[0] + y[1] * y[1];
    Ok((I * r2 / (2.0 * t)).exp() / (2.0 * PI * I * t))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PropagatorValue {
    pub model: MagneticModel,
    pub y: [f64; 2],
    #[serde(with = "crate::report::complex")]
    pub value: C64,
    pub convention: Convention,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagatorReport {
    pub model: MagneticModel,
    pub y: [f64; 2],
    pub grid_points: usize,
    pub caustic: CausticReport,
    /// Lemma composition with numeric ingredients; the authoritative value.
    pub composed: TTransformReport,
    /// The same composition from closed-form ingredients.
    #[serde(with = "crate::report::complex")]
    pub composed_closed: C64,
    /// Numeric composition with the printed `−½` lemma exponent.
    #[serde(with = "crate::report::complex")]
    pub lemma_as_printed: C64,
    /// The printed propagator formula, for comparison only.
    #[serde(with = "crate::report::complex")]
    pub printed: C64,
    #[serde(with = "crate::report::complex")]
    pub free_reference: C64,
    pub composed_vs_closed: f64,
    pub composed_vs_printed: f64,
    pub composed_vs_free: f64,
}

impl PropagatorReport {
    pub fn value(&self, convention: Convention) -> PropagatorValue {
        PropagatorValue {
            model: self.model,
            y: self.y,
            value: match convention {
                Convention::Composed => self.composed.value,
                Convention::Printed => self.printed,
                Convention::LemmaAsPrinted => self.lemma_as_printed,
            },
            convention,
        }
    }
}

fn rel_gap(a: C64, b: C64) -> f64 {
    (a - b).norm() / b.norm()
}

/// Generalized expectation by composing the numeric lemma ingredients on a
/// grid of `grid_points` nodes, reported next to the closed and printed forms.
pub fn propagator(m: &MagneticModel, y: [f64; 2], grid_points: usize) -> Result<PropagatorReport> {
    let caustic = ensure_regular(m)?;
    let g = m.grid(grid_points)?;
    let problem = MasterProblem::magnetic(m, &g)?;
    let zero = GridFunctionPair::zeros(&g);
    let composed = problem.evaluate(None, &y, &zero, Convention::Composed)?;
    let lemma_as_printed = problem.evaluate(None, &y, &zero, Convention::LemmaAsPrinted)?.value;
    let composed_closed = closed_propagator(m, y, Convention::Composed)?.value;
    let printed = printed_propagator(m, y)?;
    let free_reference = free_limit_reference(m.t(), y)?;
    Ok(PropagatorReport {
        model: *m,
        y,
        grid_points,
        caustic,
        composed_vs_closed: rel_gap(composed.value, composed_closed),
        composed_vs_printed: rel_gap(printed, composed.value),
        composed_vs_free: rel_gap(composed.value, free_reference),
        composed,
        composed_closed,
        lemma_as_printed,
        printed,
        free_reference,
    })
}

/// Green's function with an external force `F`: `T(I_mag)(F)`.
pub fn external_force_green(m: &MagneticModel, y: [f64; 2], force: &GridFunctionPair, convention: Convention) -> Result<C64> {
    Ok(magnetic_T(m, y, force, convention)?.value)
}

/// Square `[c₁ ± h, c₂ ± h]` sampled on `points × points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialBox {
    pub center: [f64; 2],
    pub half_width: f64,
    pub points: usize,
}

/// `[start, end]` sampled on `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpan {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

/// Coarsest finite-difference steps and the number of halvings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub space: f64,
    pub time: f64,
    pub levels: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            space: 0.04,
            time: 0.02,
            levels: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualLevel {
    pub space_step: f64,
    pub time_step: f64,
    /// `‖i∂ₜG − HG‖ / ‖G‖` over the sample points.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub k: f64,
    pub convention: Convention,
    pub levels: Vec<ResidualLevel>,
    /// `log₂(rₗ / rₗ₊₁)` between successive levels.
    pub orders: Vec<f64>,
    pub min_order: f64,
    /// `G ≡ 0` on the sample set, so no relative residual exists.
    pub degenerate: bool,
    /// Every observed order is at least [`RESIDUAL_MIN_ORDER`].
    pub converges: bool,
}

/// Order that counts as convergence of the residual.
pub const RESIDUAL_MIN_ORDER: f64 = 1.9;

fn check_span(k: f64, y_box: &SpatialBox, span: &TimeSpan, steps: &StepSchedule) -> Result<()> {
    let ok = span.start.is_finite()
        && span.end.is_finite()
        && span.start - steps.time > 0.0
        && span.end >= span.start
        && span.points >= 1
        && y_box.points >= 1
        && y_box.half_width >= 0.0
        && steps.space > 0.0
        && steps.time > 0.0
        && steps.levels >= 2;
    if !ok {
        return Err(Error::invalid(
            "residual check needs 0 < start − time step ≤ end, positive steps, at least two levels",
        ));
    }
    let (lo, hi) = ((span.start - steps.time) * k.abs(), (span.end + steps.time) * k.abs());
    let first = (lo / FRAC_PI_2).floor() + 1.0;
    if k != 0.0 && first * FRAC_PI_2 <= hi + CAUSTIC_TOLERANCE {
        let kt = first * FRAC_PI_2;
        let m = MagneticModel::new(1.0, kt)?;
        return Err(Error::Caustic {
            kt,
            class: caustic_check(&m).class,
            distance: 0.0,
        });
    }
    Ok(())
}

/// Finite-difference residual of `i∂ₜG = HG` for the closed-form propagator
/// `G(y, t)` in the given convention, `H = −½Δ − kL_z + ½k²|y|²`.
pub fn schrodinger_residual(
    k: f64,
    y_box: &SpatialBox,
    span: &TimeSpan,
    convention: Convention,
    steps: &StepSchedule,
) -> Result<ResidualReport> {
    check_span(k, y_box, span, steps)?;
    let lin = |a: f64, b: f64, n: usize, i: usize| if n == 1 { 0.5 * (a + b) } else { a + (b - a) * i as f64 / (n - 1) as f64 };
    let green = |y1: f64, y2: f64, t: f64| -> Result<C64> {
        Ok(closed_propagator(&MagneticModel::new(k, t)?, [y1, y2], convention)?.value)
    };
    let mut levels = Vec::with_capacity(steps.levels);
    let mut degenerate = false;
    for level in 0..steps.levels {
        let h = steps.space / (1u64 << level) as f64;
        let ht = steps.time / (1u64 << level) as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for it in 0..span.points {
            let t = lin(span.start, span.end, span.points, it);
            for i1 in 0..y_box.points {
                let y1 = lin(y_box.center[0] - y_box.half_width, y_box.center[0] + y_box.half_width, y_box.points, i1);
                for i2 in 0..y_box.points {
                    let y2 = lin(y_box.center[1] - y_box.half_width, y_box.center[1] + y_box.half_width, y_box.points, i2);
                    let g0 = green(y1, y2, t)?;
                    let dt = (green(y1, y2, t + ht)? - green(y1, y2, t - ht)?) / (2.0 * ht);
                    let (xp, xm) = (green(y1 + h, y2, t)?, green(y1 - h, y2, t)?);
                    let (yp, ym) = (green(y1, y2 + h, t)?, green(y1, y2 - h, t)?);
                    let lap = (xp + xm + yp + ym - 4.0 * g0) / (h * h);
                    let d1 = (xp - xm) / (2.0 * h);
                    let d2 = (yp - ym) / (2.0 * h);
                    let lz = -I * (y1 * d2 - y2 * d1);
                    let hg = -0.5 * lap - k * lz + 0.5 * k * k * (y1 * y1 + y2 * y2) * g0;
                    num += (I * dt - hg).norm_sqr();
                    den += g0.norm_sqr();
                }
            }
        }
        let residual = if den > 0.0 {
            (num / den).sqrt()
        } else {
            degenerate = true;
            f64::NAN
        };
        levels.push(ResidualLevel {
            space_step: h,
            time_step: ht,
            residual,
        });
    }
    let orders: Vec<f64> = levels
        .windows(2)
        .map(|w| (w[0].residual / w[1].residual).log2())
        .collect();
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ResidualReport {
        k,
        convention,
        converges: !degenerate && min_order.is_finite() && min_order >= RESIDUAL_MIN_ORDER,
        min_order: if min_order.is_finite() { min_order } else { f64::NAN },
        levels,
        orders,
        degenerate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConventionAdjudication {
    pub reports: Vec<ResidualReport>,
    /// Conventions whose residual converges.
    pub passing: Vec<Convention>,
    /// The passing convention when exactly one passes.
    pub unique: Option<Convention>,
}

/// Runs the residual check for every convention.
pub fn adjudicate_conventions(k: f64, y_box: &SpatialBox, span: &TimeSpan, steps: &StepSchedule) -> Result<ConventionAdjudication> {
    let reports = Convention::ALL
        .iter()
        .map(|&c| schrodinger_residual(k, y_box, span, c, steps))
        .collect::<Result<Vec<_>>>()?;
    let passing: Vec<Convention> = reports.iter().filter(|r| r.converges).map(|r| r.convention).collect();
    Ok(ConventionAdjudication {
        unique: if passing.len() == 1 { Some(passing[0]) } else { None },
        passing,
        reports,
    })
}
