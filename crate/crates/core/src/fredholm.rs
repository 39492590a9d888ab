//! Solving `N x = η`, the closed-form preimages of the indicator generators,
//! and the Gram matrix `(ηᵢ, N⁻¹ ηⱼ)`.
//!
//! On the grid `N = −i (Id + B)` with `B` real symmetric, so `N⁻¹ = i (Id + B)⁻¹`.
//! Two independent routes are provided: a dense LU of `Id + B` with iterative
//! refinement, and [`resolvent_ode_solve`], which inverts the continuum
//! operator exactly for piecewise-constant right-hand sides.

use std::sync::{Arc, OnceLock};

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use serde::Serialize;

use crate::cache::{model_key, KeyedCache};
use crate::feynman::{caustic_check, CausticClass};
use crate::grid::{pair, sample, Grid, GridFunctionPair};
use crate::operators::{cumulative_integral, resolvent_generator, MagneticModel};
use crate::{Error, Result, C64, I};

/// Refuse when `|cos kt|` or `|cos 2kt + 1|` falls below this.
pub const CAUSTIC_GUARD: f64 = 1e-8;

/// Refuse solves whose 1-norm condition estimate exceeds this.
pub const CONDITION_THRESHOLD: f64 = 1e12;

/// Target relative residual for refined solves.
pub const SOLVER_TOLERANCE: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);
const MAX_REFINEMENT: usize = 3;

enum Factor {
    Real { mat: Mat<f64>, lu: PartialPivLu<f64> },
    Complex { mat: Mat<C64>, lu: PartialPivLu<C64> },
}

/// Dense LU of a square matrix with refinement and a condition estimate.
pub struct DenseSolver {
    factor: Factor,
    condition: f64,
}

/// Solution of one linear system with its diagnostics.
#[derive(Debug, Clone)]
pub struct Solved {
    pub x: Vec<C64>,
    /// `‖A x − b‖∞ / ‖b‖∞` after refinement.
    pub residual: f64,
    pub refinement_steps: usize,
}

impl DenseSolver {
    pub fn real(mat: Mat<f64>) -> Result<Self> {
        check_square(mat.nrows(), mat.ncols())?;
        let lu = mat.partial_piv_lu();
        let mut s = Self {
            factor: Factor::Real { mat, lu },
            condition: f64::NAN,
        };
        s.condition = s.estimate_condition();
        Ok(s)
    }

    pub fn complex(mat: Mat<C64>) -> Result<Self> {
        check_square(mat.nrows(), mat.ncols())?;
        let lu = mat.partial_piv_lu();
        let mut s = Self {
            factor: Factor::Complex { mat, lu },
            condition: f64::NAN,
        };
        s.condition = s.estimate_condition();
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        match &self.factor {
            Factor::Real { mat, .. } => mat.nrows(),
            Factor::Complex { mat, .. } => mat.nrows(),
        }
    }

    /// Estimate of `‖A‖₁ ‖A⁻¹‖₁` (Hager's method).
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Errors with [`Error::NearSingular`] when the estimate exceeds the threshold.
    pub fn ensure_conditioned(&self, context: &str) -> Result<()> {
        if self.condition.is_finite() && self.condition <= CONDITION_THRESHOLD {
            Ok(())
        } else {
            Err(Error::NearSingular {
                context: context.to_string(),
                condition: self.condition,
            })
        }
    }

    /// `A⁻¹ b` by LU with up to three steps of iterative refinement.
    pub fn solve(&self, b: &[C64]) -> Result<Solved> {
        if b.len() != self.dim() {
            return Err(Error::GridMismatch(format!(
                "right-hand side has length {}, system has dimension {}",
                b.len(),
                self.dim()
            )));
        }
        let scale = sup(b);
        if scale == 0.0 {
            return Ok(Solved {
                x: vec![ZERO; b.len()],
                residual: 0.0,
                refinement_steps: 0,
            });
        }
        let mut x = self.lu_solve(b, false);
        let mut r = self.residual_vec(&x, b);
        let mut residual = sup(&r) / scale;
        let mut steps = 0;
        while residual > 0.0 && steps < MAX_REFINEMENT {
            let dx = self.lu_solve(&r, false);
            let trial: Vec<C64> = x.iter().zip(&dx).map(|(a, d)| a + d).collect();
            let r_trial = self.residual_vec(&trial, b);
            let res_trial = sup(&r_trial) / scale;
            if res_trial >= residual {
                break;
            }
            x = trial;
            r = r_trial;
            residual = res_trial;
            steps += 1;
            if residual <= SOLVER_TOLERANCE * 1e-3 {
                break;
            }
        }
        if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NumericFailure("LU solve produced non-finite values".into()));
        }
        Ok(Solved {
            x,
            residual,
            refinement_steps: steps,
        })
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        match &self.factor {
            Factor::Real { mat, .. } => {
                let xm = Mat::from_fn(x.len(), 2, |i, c| if c == 0 { x[i].re } else { x[i].im });
                let y = mat * &xm;
                (0..x.len()).map(|i| C64::new(y[(i, 0)], y[(i, 1)])).collect()
            }
            Factor::Complex { mat, .. } => {
                let xm = Mat::from_fn(x.len(), 1, |i, _| x[i]);
                let y = mat * &xm;
                (0..x.len()).map(|i| y[(i, 0)]).collect()
            }
        }
    }

    fn residual_vec(&self, x: &[C64], b: &[C64]) -> Vec<C64> {
        self.apply(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect()
    }

    fn lu_solve(&self, b: &[C64], adjoint: bool) -> Vec<C64> {
        match &self.factor {
            Factor::Real { lu, .. } => {
                let bm = Mat::from_fn(b.len(), 2, |i, c| if c == 0 { b[i].re } else { b[i].im });
                // real A: A^H = A^T
                let y = if adjoint { lu.solve_transpose(&bm) } else { lu.solve(&bm) };
                (0..b.len()).map(|i| C64::new(y[(i, 0)], y[(i, 1)])).collect()
            }
            Factor::Complex { lu, .. } => {
                let bm = Mat::from_fn(b.len(), 1, |i, _| b[i]);
                let y = if adjoint { lu.solve_adjoint(&bm) } else { lu.solve(&bm) };
                (0..b.len()).map(|i| y[(i, 0)]).collect()
            }
        }
    }

    fn norm1(&self) -> f64 {
        let col_sum = |n: usize, f: &dyn Fn(usize, usize) -> f64| -> f64 {
            (0..n).map(|j| (0..n).map(|i| f(i, j)).sum::<f64>()).fold(0.0, f64::max)
        };
        match &self.factor {
            Factor::Real { mat, .. } => col_sum(mat.nrows(), &|i, j| mat[(i, j)].abs()),
            Factor::Complex { mat, .. } => col_sum(mat.nrows(), &|i, j| mat[(i, j)].norm()),
        }
    }

    fn estimate_condition(&self) -> f64 {
        let n = self.dim();
        let mut x = vec![C64::new(1.0 / n as f64, 0.0); n];
        let mut estimate = 0.0;
        for _ in 0..5 {
            let y = self.lu_solve(&x, false);
            if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return f64::INFINITY;
            }
            estimate = y.iter().map(|z| z.norm()).sum::<f64>();
            let xi: Vec<C64> = y
                .iter()
                .map(|z| if z.norm() > 0.0 { z / z.norm() } else { C64::new(1.0, 0.0) })
                .collect();
            let z = self.lu_solve(&xi, true);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.norm()))
                .fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| (a.conj() * b).re).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![ZERO; n];
            x[jmax] = C64::new(1.0, 0.0);
        }
        estimate * self.norm1()
    }
}

fn check_square(r: usize, c: usize) -> Result<()> {
    if r == c && r > 0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("solver needs a non-empty square matrix, got {r}×{c}")))
    }
}

fn sup(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn resolvent_cache() -> &'static KeyedCache<(u64, u64, usize), Arc<DenseSolver>> {
    static CACHE: OnceLock<KeyedCache<(u64, u64, usize), Arc<DenseSolver>>> = OnceLock::new();
    CACHE.get_or_init(|| KeyedCache::new(4))
}

/// Factorization of `Id + B` for this model and grid, computed once.
pub fn magnetic_resolvent(m: &MagneticModel, g: &Grid) -> Result<Arc<DenseSolver>> {
    m.check_grid(g)?;
    resolvent_cache().get_or_try_init(model_key(m.k(), m.t(), g.n()), || {
        let mut b = resolvent_generator(m, g)?;
        for i in 0..b.nrows() {
            b[(i, i)] += 1.0;
        }
        Ok(Arc::new(DenseSolver::real(b)?))
    })
}

/// `(Id + B) x` in O(n) via cumulative sums.
pub fn apply_shifted_generator(m: &MagneticModel, x: &GridFunctionPair) -> Result<GridFunctionPair> {
    m.check_grid(x.grid())?;
    let g = x.grid();
    let c1 = antisymmetric_part(g, x.comp1());
    let c2 = antisymmetric_part(g, x.comp2());
    let k = m.k();
    let top = x.comp1().iter().zip(&c2).map(|(a, c)| a - c * k).collect();
    let bottom = x.comp2().iter().zip(&c1).map(|(a, c)| a + c * k).collect();
    GridFunctionPair::new(g, top, bottom)
}

/// `N x = −i (Id + B) x` in O(n).
#[allow(non_snake_case)]
pub fn apply_N(m: &MagneticModel, x: &GridFunctionPair) -> Result<GridFunctionPair> {
    Ok(apply_shifted_generator(m, x)?.scale(-I))
}

/// `(A − A*) v` at the nodes.
fn antisymmetric_part(g: &Grid, v: &[C64]) -> Vec<C64> {
    let forward = cumulative_integral(g, v);
    let w = g.weights();
    let mut acc = ZERO;
    let mut backward = vec![ZERO; v.len()];
    for j in (0..v.len()).rev() {
        backward[j] = acc + v[j] * (0.5 * w[j]);
        acc += v[j] * w[j];
    }
    forward.iter().zip(&backward).map(|(a, b)| a - b).collect()
}

/// Refuses parameters where `Id + B` is singular in the continuum.
fn ensure_invertible(m: &MagneticModel) -> Result<()> {
    let c = m.kt().cos().abs();
    if c < CAUSTIC_GUARD {
        let report = caustic_check(m);
        return Err(Error::Caustic {
            kt: m.kt(),
            class: CausticClass::HalfInteger,
            distance: report.distance,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub x: GridFunctionPair,
    /// `‖N x − rhs‖∞ / ‖rhs‖∞`.
    pub residual: f64,
    pub condition: f64,
    pub refinement_steps: usize,
}

/// `x = N⁻¹ rhs = i (Id + B)⁻¹ rhs` by dense LU.
#[allow(non_snake_case)]
pub fn solve_N(m: &MagneticModel, g: &Grid, rhs: &GridFunctionPair) -> Result<SolveReport> {
    m.check_grid(g)?;
    g.ensure_same(rhs.grid())?;
    if m.k() == 0.0 {
        return Ok(SolveReport {
            x: rhs.scale(I),
            residual: 0.0,
            condition: 1.0,
            refinement_steps: 0,
        });
    }
    let solver = magnetic_resolvent(m, g)?;
    if m.kt().cos().abs() < CAUSTIC_GUARD {
        return Err(Error::NearSingular {
            context: format!("Id + L(Id + K)⁻¹ at kt = {} (cos kt ≈ 0)", m.kt()),
            condition: solver.condition().max(1.0 / CAUSTIC_GUARD),
        });
    }
    solver.ensure_conditioned("Id + L(Id + K)⁻¹")?;
    let s = solver.solve(&rhs.stacked())?;
    let x = GridFunctionPair::from_stacked(g, &s.x)?.scale(I);
    let check = apply_N(m, &x)?.sub(rhs)?;
    let scale = rhs.sup_norm();
    Ok(SolveReport {
        residual: if scale > 0.0 { check.sup_norm() / scale } else { 0.0 },
        x,
        condition: solver.condition(),
        refinement_steps: s.refinement_steps,
    })
}

/// `sin(2kt) / (cos(2kt) + 1)`, with the caustic guard.
fn preimage_ratio(m: &MagneticModel) -> Result<f64> {
    let kt2 = 2.0 * m.kt();
    let denom = kt2.cos() + 1.0;
    if denom.abs() < CAUSTIC_GUARD {
        return Err(Error::Caustic {
            kt: m.kt(),
            class: CausticClass::HalfInteger,
            distance: caustic_check(m).distance,
        });
    }
    Ok(kt2.sin() / denom)
}

/// `N⁻¹ (1, 0)`: `f₁ = i cos 2ks + i r sin 2ks`, `f₂ = i r cos 2ks − i sin 2ks`
/// with `r = sin 2kt / (cos 2kt + 1) = tan kt`.
pub fn closed_preimage_f(m: &MagneticModel, g: &Grid) -> Result<GridFunctionPair> {
    m.check_grid(g)?;
    let r = preimage_ratio(m)?;
    let k2 = 2.0 * m.k();
    Ok(sample(
        |s| I * (k2 * s).cos() + I * r * (k2 * s).sin(),
        |s| I * r * (k2 * s).cos() - I * (k2 * s).sin(),
        g,
    ))
}

/// `N⁻¹ (0, 1) = (−f₂, f₁)`.
pub fn closed_preimage_g(m: &MagneticModel, g: &Grid) -> Result<GridFunctionPair> {
    Ok(closed_preimage_f(m, g)?.rotate())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PreimageResidual {
    pub grid_points: usize,
    pub f_sup: f64,
    pub f_l2: f64,
    pub g_sup: f64,
    pub g_l2: f64,
}

impl PreimageResidual {
    pub fn sup(&self) -> f64 {
        self.f_sup.max(self.g_sup)
    }
}

/// `‖N f − (1, 0)‖` and `‖N g − (0, 1)‖` in sup and quadrature norms.
pub fn verify_preimage(m: &MagneticModel, g: &Grid) -> Result<PreimageResidual> {
    let (e1, e2) = indicator_etas(g);
    let rf = apply_N(m, &closed_preimage_f(m, g)?)?.sub(&e1)?;
    let rg = apply_N(m, &closed_preimage_g(m, g)?)?.sub(&e2)?;
    Ok(PreimageResidual {
        grid_points: g.n(),
        f_sup: rf.sup_norm(),
        f_l2: rf.l2_norm(),
        g_sup: rg.sup_norm(),
        g_l2: rg.l2_norm(),
    })
}

/// `η₁ = (1_[0,t), 0)` and `η₂ = (0, 1_[0,t))`.
pub fn indicator_etas(g: &Grid) -> (GridFunctionPair, GridFunctionPair) {
    let one = C64::new(1.0, 0.0);
    (sample(|_| one, |_| ZERO, g), sample(|_| ZERO, |_| one, g))
}

#[derive(Debug, Clone, Serialize)]
pub struct GramMatrix {
    #[serde(with = "crate::report::complex_matrix")]
    pub entries: Vec<Vec<C64>>,
    #[serde(skip)]
    pub etas: Vec<GridFunctionPair>,
    /// `max |Mᵢⱼ − Mⱼᵢ|`.
    pub symmetry_defect: f64,
    /// `max |Re Mᵢⱼ| / max |Mᵢⱼ|`.
    pub real_part_ratio: f64,
    pub condition: f64,
    pub max_solve_residual: f64,
}

impl GramMatrix {
    pub fn from_entries(entries: Vec<Vec<C64>>, etas: Vec<GridFunctionPair>, condition: f64, residual: f64) -> Self {
        let mut defect = 0.0f64;
        let mut re = 0.0f64;
        let mut size = 0.0f64;
        for (i, row) in entries.iter().enumerate() {
            for (j, z) in row.iter().enumerate() {
                defect = defect.max((z - entries[j][i]).norm());
                re = re.max(z.re.abs());
                size = size.max(z.norm());
            }
        }
        Self {
            entries,
            etas,
            symmetry_defect: defect,
            real_part_ratio: if size > 0.0 { re / size } else { 0.0 },
            condition,
            max_solve_residual: residual,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// `(ηᵢ, N⁻¹ ηⱼ)` via [`solve_N`] and the bilinear pairing.
pub fn gram_matrix(m: &MagneticModel, g: &Grid, etas: &[GridFunctionPair]) -> Result<GramMatrix> {
    if let Some(j) = etas.iter().position(|e| e.is_zero()) {
        return Err(Error::invalid(format!("η{} is identically zero", j + 1)));
    }
    let mut solved = Vec::with_capacity(etas.len());
    let mut condition = 1.0f64;
    let mut residual = 0.0f64;
    for e in etas {
        let s = solve_N(m, g, e)?;
        condition = condition.max(s.condition);
        residual = residual.max(s.residual);
        solved.push(s.x);
    }
    let mut entries = vec![vec![ZERO; etas.len()]; etas.len()];
    for (i, ei) in etas.iter().enumerate() {
        for (j, xj) in solved.iter().enumerate() {
            entries[i][j] = pair(ei, xj)?;
        }
    }
    Ok(GramMatrix::from_entries(entries, etas.to_vec(), condition, residual))
}

/// `(i/k) tan(kt)` (or `i t` at `k = 0`), the diagonal of the indicator Gram matrix.
pub fn analytic_gram_diagonal(m: &MagneticModel) -> Result<C64> {
    if m.k() == 0.0 {
        return Ok(I * m.t());
    }
    ensure_invertible(m)?;
    Ok(I * (m.kt().tan() / m.k()))
}

/// `N⁻¹ rhs` from the continuum resolvent, treating `rhs` as piecewise
/// constant on the grid cells.
///
/// With `z = x₁ + i x₂` the system `(Id + B) x = r` decouples into
/// `(Id + iκC) z = ρ`, `C = A − A*`, for `(κ, ρ) = (k, r₁ + i r₂)` and, for
/// `w = x₁ − i x₂`, `(κ, ρ) = (−k, r₁ − i r₂)`. Writing `Z(s) = ∫₀ˢ z` this is
/// `Z' + 2iκ Z = ρ + iκ Z(t)`, solved by an exact exponential recursion.
pub fn resolvent_ode_solve(m: &MagneticModel, g: &Grid, rhs: &GridFunctionPair) -> Result<GridFunctionPair> {
    m.check_grid(g)?;
    g.ensure_same(rhs.grid())?;
    ensure_invertible(m)?;
    let rho_z: Vec<C64> = rhs.comp1().iter().zip(rhs.comp2()).map(|(a, b)| a + I * b).collect();
    let rho_w: Vec<C64> = rhs.comp1().iter().zip(rhs.comp2()).map(|(a, b)| a - I * b).collect();
    let z = decoupled_solve(m.k(), g, &rho_z)?;
    let w = decoupled_solve(-m.k(), g, &rho_w)?;
    let x1: Vec<C64> = z.iter().zip(&w).map(|(a, b)| (a + b) * 0.5 * I).collect();
    let x2: Vec<C64> = z.iter().zip(&w).map(|(a, b)| (a - b) / (2.0 * I) * I).collect();
    GridFunctionPair::new(g, x1, x2)
}

/// Solves `z + iκ(∫₀ˢ z − ∫ₛᵗ z) = ρ` at the nodes.
fn decoupled_solve(kappa: f64, g: &Grid, rho: &[C64]) -> Result<Vec<C64>> {
    let w = g.step();
    let t = g.t();
    // (1 − e^{−2iκw}) / (2iκ) = w·h(2κw)
    let full = w * one_minus_exp_over(2.0 * kappa * w);
    let half = 0.5 * w * one_minus_exp_over(kappa * w);
    let decay_full = (-I * (2.0 * kappa * w)).exp();
    let decay_half = (-I * (kappa * w)).exp();
    let mut e = ZERO;
    let mut r_mid = Vec::with_capacity(rho.len());
    for &rj in rho {
        r_mid.push(decay_half * e + rj * half);
        e = decay_full * e + rj * full;
    }
    let denom = C64::new(1.0, 0.0) + (-I * (2.0 * kappa * t)).exp();
    if denom.norm() < CAUSTIC_GUARD {
        return Err(Error::SingularFactor(format!("1 + e^(−2iκt) vanishes at κt = {}", kappa * t)));
    }
    let z_t = e * 2.0 / denom;
    Ok(g.nodes()
        .iter()
        .zip(rho)
        .zip(&r_mid)
        .map(|((&s, &rj), &rs)| {
            let big_z = rs + z_t * (C64::new(1.0, 0.0) - (-I * (2.0 * kappa * s)).exp()) * 0.5;
            rj - I * kappa * (big_z * 2.0 - z_t)
        })
        .collect())
}

/// `(1 − e^{−iθ}) / (iθ)`, with its series near 0.
fn one_minus_exp_over(theta: f64) -> C64 {
    if theta.abs() < 1e-4 {
        let t2 = theta * theta;
        C64::new(1.0 - t2 / 6.0, -theta / 2.0 + theta * t2 / 24.0)
    } else {
        (C64::new(1.0, 0.0) - (-I * theta).exp()) / (I * theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::operators::build_N;
    use faer::linalg::solvers::DenseSolveCore;

    fn model(k: f64, t: f64) -> MagneticModel {
        MagneticModel::new(k, t).unwrap()
    }

    /// Adaptive Simpson quadrature, used as an independent integration oracle.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
    }

    #[test]
    fn zero_coupling_solve_is_multiplication_by_i() {
        let m = model(0.0, 1.0);
        let g = m.grid(16).unwrap();
        let rhs = sample(|s| C64::new(s, 1.0), |s| C64::new(0.0, s * s), &g);
        let x = solve_N(&m, &g, &rhs).unwrap();
        assert_eq!(x.x, rhs.scale(I));
        let r = verify_preimage(&m, &g).unwrap();
        assert!(r.sup() < 1e-15);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let m = model(1.0, 1.0);
        let g = m.grid(40).unwrap();
        let x = solve_N(&m, &g, &GridFunctionPair::zeros(&g)).unwrap();
        assert!(x.x.is_zero());
    }

    #[test]
    fn fast_apply_matches_dense_n() {
        let m = model(0.7, 1.3);
        let g = m.grid(30).unwrap();
        let x = sample(|s| C64::new(s.sin(), s), |s| C64::new(1.0 - s, (3.0 * s).cos()), &g);
        let dense = build_N(&m, &g).unwrap().apply(&x).unwrap();
        let fast = apply_N(&m, &x).unwrap();
        assert!(dense.sub(&fast).unwrap().sup_norm() < 1e-14);
    }

    #[test]
    fn solve_residual_is_small() {
        let m = model(1.0, 1.0);
        let g = m.grid(200).unwrap();
        let rhs = sample(|s| C64::new(s.cos(), 0.3), |s| C64::new(s, -s * s), &g);
        let s = solve_N(&m, &g, &rhs).unwrap();
        assert!(s.residual < SOLVER_TOLERANCE, "{}", s.residual);
        let y = s.x.scale(-I);
        let back = apply_shifted_generator(&m, &y).unwrap();
        assert!(back.sub(&rhs).unwrap().sup_norm() <= SOLVER_TOLERANCE * rhs.sup_norm());
        assert!(s.condition > 1.0 && s.condition < 1e4);
    }

    #[test]
    fn condition_estimate_is_a_lower_bound_of_the_true_condition() {
        let mat = Mat::from_fn(3, 3, |i, j| [[4.0f64, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 1e-6]][i][j]);
        let inv = mat.partial_piv_lu().inverse();
        let col1 = |a: &Mat<f64>| (0..3).map(|j| (0..3).map(|i| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
        let exact = col1(&mat) * col1(&inv);
        let s = DenseSolver::real(mat).unwrap();
        assert!(s.condition() <= exact * (1.0 + 1e-12));
        assert!(s.condition() >= 0.1 * exact);
    }

    #[test]
    fn near_caustic_is_refused() {
        let m = model(1.0, std::f64::consts::FRAC_PI_2);
        let g = m.grid(50).unwrap();
        let (e1, _) = indicator_etas(&g);
        match solve_N(&m, &g, &e1) {
            Err(Error::NearSingular { condition, .. }) => assert!(condition > 1.0),
            other => panic!("expected near-singular, got {other:?}"),
        }
        assert!(matches!(closed_preimage_f(&m, &g), Err(Error::Caustic { .. })));
        assert!(resolvent_ode_solve(&m, &g, &e1).is_err());
    }

    #[test]
    fn singular_dense_system_is_flagged() {
        let mat = Mat::from_fn(2, 2, |i, j| [[1.0, 2.0], [2.0, 4.0]][i][j]);
        let s = DenseSolver::real(mat).unwrap();
        assert!(s.ensure_conditioned("test").is_err());
    }

    #[test]
    fn closed_preimage_values() {
        let m = model(1.0, 1.0);
        let g = make_grid(1.0, 4).unwrap();
        let f = closed_preimage_f(&m, &g).unwrap();
        let f1 = |s: f64| I * (2.0 * s).cos() + I * 1f64.tan() * (2.0 * s).sin();
        assert!((f.comp1()[0] - f1(0.125)).norm() < 1e-14);
        // f₁(0) = i, f₂(0) = i tan(kt) from the limits of the formulas
        let r = preimage_ratio(&m).unwrap();
        assert!((r - 1.557_407_724_654_902).abs() < 1e-14);
        let gp = closed_preimage_g(&m, &g).unwrap();
        for j in 0..4 {
            assert_eq!(gp.comp2()[j], f.comp1()[j]);
            assert_eq!(gp.comp1()[j], -f.comp2()[j]);
        }
        let m0 = model(0.0, 1.0);
        let f0 = closed_preimage_f(&m0, &g).unwrap();
        assert!(f0.comp1().iter().all(|&z| z == I));
        assert!(f0.comp2().iter().all(|&z| z.norm() == 0.0));
        let g0 = closed_preimage_g(&m0, &g).unwrap();
        assert!(g0.comp2().iter().all(|&z| z == I));
    }

    #[test]
    fn solve_matches_closed_preimage() {
        let m = model(1.0, 1.0);
        let gap = |n| {
            let g = m.grid(n).unwrap();
            let (e1, _) = indicator_etas(&g);
            let x = solve_N(&m, &g, &e1).unwrap().x;
            x.sub(&closed_preimage_f(&m, &g).unwrap()).unwrap().sup_norm()
        };
        let (a, b) = (gap(200), gap(400));
        assert!(b < 1e-4, "{b}");
        assert!((a / b).log2() > 1.8, "order {}", (a / b).log2());
    }

    #[test]
    fn preimage_residual_is_second_order() {
        let m = model(1.0, 1.0);
        let r: Vec<f64> = [100, 200, 400]
            .iter()
            .map(|&n| verify_preimage(&m, &m.grid(n).unwrap()).unwrap().sup())
            .collect();
        for w in r.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.9, "{r:?}");
        }
    }

    #[test]
    fn oracle_integrals_of_the_closed_preimage() {
        // ∫₀ᵗ f₁ = (i/k) tan(kt) and ∫₀ᵗ f₂ = 0, by adaptive Simpson
        for (k, t) in [(1.0f64, 1.0f64), (0.5, 2.0), (0.3, 0.7), (-0.8, 1.1)] {
            let tan = (k * t).tan();
            let im1 = simpson(&|s| (2.0 * k * s).cos() + tan * (2.0 * k * s).sin(), 0.0, t, 1e-13);
            let im2 = simpson(&|s| tan * (2.0 * k * s).cos() - (2.0 * k * s).sin(), 0.0, t, 1e-13);
            assert!((im1 - tan / k).abs() < 1e-10, "k={k} t={t}: {im1} vs {}", tan / k);
            assert!(im2.abs() < 1e-10);
        }
    }

    #[test]
    fn gram_matrix_for_indicators() {
        let m = model(1.0, 1.0);
        let g = m.grid(400).unwrap();
        let (e1, e2) = indicator_etas(&g);
        let gm = gram_matrix(&m, &g, &[e1, e2]).unwrap();
        let tan = I * 1f64.tan();
        assert!((gm.entries[0][0] - tan).norm() < 1e-4);
        assert!((gm.entries[1][1] - tan).norm() < 1e-4);
        assert!(gm.entries[0][1].norm() < 1e-4);
        assert!(gm.symmetry_defect < 1e-12);
        assert!(gm.real_part_ratio < 1e-8);
        assert!((analytic_gram_diagonal(&m).unwrap() - tan).norm() < 1e-15);
    }

    #[test]
    fn gram_matrix_free_limit() {
        let t = 1.7;
        for k in [1e-2, 1e-3] {
            let m = model(k, t);
            let g = m.grid(100).unwrap();
            let (e1, e2) = indicator_etas(&g);
            let gm = gram_matrix(&m, &g, &[e1, e2]).unwrap();
            assert!((gm.entries[0][0] - I * t).norm() < 10.0 * k * k);
        }
        assert_eq!(analytic_gram_diagonal(&model(0.0, t)).unwrap(), I * t);
    }

    #[test]
    fn gram_rejects_zero_eta() {
        let m = model(1.0, 1.0);
        let g = m.grid(10).unwrap();
        assert!(gram_matrix(&m, &g, &[GridFunctionPair::zeros(&g)]).is_err());
    }

    #[test]
    fn ode_route_matches_lu_route() {
        let m = model(1.0, 1.0);
        let g = m.grid(400).unwrap();
        let rhs = sample(
            |s| C64::new((-(s - 0.4f64).powi(2) / 0.01).exp(), 0.0),
            |s| C64::new(0.0, -(-(s - 0.6f64).powi(2) / 0.02).exp()),
            &g,
        );
        let lu = solve_N(&m, &g, &rhs).unwrap().x;
        let ode = resolvent_ode_solve(&m, &g, &rhs).unwrap();
        let gap = lu.sub(&ode).unwrap().sup_norm() / lu.sup_norm();
        assert!(gap < 1e-4, "{gap}");
        let (e1, _) = indicator_etas(&g);
        let ode_f = resolvent_ode_solve(&m, &g, &e1).unwrap();
        // constant data is reproduced exactly by the continuum resolvent
        assert!(ode_f.sub(&closed_preimage_f(&m, &g).unwrap()).unwrap().sup_norm() < 1e-12);
    }

    #[test]
    fn ode_route_small_coupling() {
        let m = model(1e-9, 1.0);
        let g = m.grid(50).unwrap();
        let rhs = sample(|s| C64::new(s, 0.0), |_| C64::new(0.0, 1.0), &g);
        let x = resolvent_ode_solve(&m, &g, &rhs).unwrap();
        assert!(x.sub(&rhs.scale(I)).unwrap().sup_norm() < 1e-8);
        // the series agrees with the direct formula at the switch point
        let direct = |th: f64| (C64::new(1.0, 0.0) - (-I * th).exp()) / (I * th);
        for th in [0.99999e-4, -0.99999e-4] {
            assert!((one_minus_exp_over(th) - direct(th)).norm() < 1e-11);
        }
    }
}
