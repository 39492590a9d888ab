//! Midpoint quadrature grid over `[0, t)` and the bilinear pairing.

use std::sync::Arc;

use crate::{Error, Result, C64};

/// Midpoint grid: nodes `s_j = (j + ½)·t/n`, uniform weights `t/n`.
#[derive(Debug, Clone)]
pub struct Grid {
    t: f64,
    n: usize,
    nodes: Arc<[f64]>,
    weights: Arc<[f64]>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.n == other.n
    }
}

impl Grid {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The common weight `t/n`.
    pub fn step(&self) -> f64 {
        self.t / self.n as f64
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "(t={}, n={}) vs (t={}, n={})",
                self.t, self.n, other.t, other.n
            )))
        }
    }
}

/// Builds the midpoint grid. `t > 0` and `n ≥ 2` are required.
pub fn make_grid(t: f64, n: usize) -> Result<Grid> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid(format!("grid duration must be positive, got {t}")));
    }
    if n < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 nodes, got {n}")));
    }
    Ok(build(t, n))
}

// Single-node grids are only used to exercise the half-diagonal rule of `A`.
pub(crate) fn build(t: f64, n: usize) -> Grid {
    let h = t / n as f64;
    let nodes: Arc<[f64]> = (0..n).map(|j| (j as f64 + 0.5) * h).collect();
    let weights: Arc<[f64]> = vec![h; n].into();
    Grid { t, n, nodes, weights }
}

/// A sampled pair `(f₁, f₂)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunctionPair {
    grid: Grid,
    comp1: Vec<C64>,
    comp2: Vec<C64>,
}

impl GridFunctionPair {
    pub fn new(grid: &Grid, comp1: Vec<C64>, comp2: Vec<C64>) -> Result<Self> {
        if comp1.len() != grid.n || comp2.len() != grid.n {
            return Err(Error::invalid(format!(
                "component lengths ({}, {}) do not match grid size {}",
                comp1.len(),
                comp2.len(),
                grid.n
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            comp1,
            comp2,
        })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            comp1: vec![C64::new(0.0, 0.0); grid.n],
            comp2: vec![C64::new(0.0, 0.0); grid.n],
        }
    }

    /// Rebuilds a pair from the stacked layout `[comp1; comp2]` of length `2n`.
    pub fn from_stacked(grid: &Grid, stacked: &[C64]) -> Result<Self> {
        if stacked.len() != 2 * grid.n {
            return Err(Error::invalid(format!(
                "stacked length {} does not match 2n = {}",
                stacked.len(),
                2 * grid.n
            )));
        }
        let (a, b) = stacked.split_at(grid.n);
        Self::new(grid, a.to_vec(), b.to_vec())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn comp1(&self) -> &[C64] {
        &self.comp1
    }

    pub fn comp2(&self) -> &[C64] {
        &self.comp2
    }

    pub fn stacked(&self) -> Vec<C64> {
        let mut v = Vec::with_capacity(2 * self.grid.n);
        v.extend_from_slice(&self.comp1);
        v.extend_from_slice(&self.comp2);
        v
    }

    pub fn scale(&self, c: C64) -> Self {
        self.map(|z| z * c)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            grid: self.grid.clone(),
            comp1: self.comp1.iter().map(|&z| f(z)).collect(),
            comp2: self.comp2.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self {
            grid: self.grid.clone(),
            comp1: self.comp1.iter().zip(&other.comp1).map(|(&a, &b)| f(a, b)).collect(),
            comp2: self.comp2.iter().zip(&other.comp2).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Swaps the components and negates the new first one: `(a, b) ↦ (−b, a)`.
    pub fn rotate(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            comp1: self.comp2.iter().map(|&z| -z).collect(),
            comp2: self.comp1.clone(),
        }
    }

    /// Largest modulus over both components.
    pub fn sup_norm(&self) -> f64 {
        self.comp1
            .iter()
            .chain(&self.comp2)
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `sqrt(Σ w |u|²)`; the conjugated norm used for solver diagnostics.
    pub fn l2_norm(&self) -> f64 {
        let w = self.grid.weights();
        let s: f64 = w
            .iter()
            .zip(self.comp1.iter().zip(&self.comp2))
            .map(|(&w, (a, b))| w * (a.norm_sqr() + b.norm_sqr()))
            .sum();
        s.sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.comp1.iter().chain(&self.comp2).all(|z| *z == C64::new(0.0, 0.0))
    }
}

/// Samples `(f1, f2)` at the grid nodes.
pub fn sample(
    f1: impl Fn(f64) -> C64,
    f2: impl Fn(f64) -> C64,
    g: &Grid,
) -> GridFunctionPair {
    GridFunctionPair {
        grid: g.clone(),
        comp1: g.nodes().iter().map(|&s| f1(s)).collect(),
        comp2: g.nodes().iter().map(|&s| f2(s)).collect(),
    }
}

/// Samples real-valued functions.
pub fn sample_real(f1: impl Fn(f64) -> f64, f2: impl Fn(f64) -> f64, g: &Grid) -> GridFunctionPair {
    sample(|s| C64::new(f1(s), 0.0), |s| C64::new(f2(s), 0.0), g)
}

/// Bilinear pairing `Σ w_j (u₁ⱼ v₁ⱼ + u₂ⱼ v₂ⱼ)`, no conjugation.
pub fn pair(u: &GridFunctionPair, v: &GridFunctionPair) -> Result<C64> {
    u.grid.ensure_same(&v.grid)?;
    Ok(pair_slices(u.grid.weights(), &u.comp1, &u.comp2, &v.comp1, &v.comp2))
}

pub(crate) fn pair_slices(w: &[f64], u1: &[C64], u2: &[C64], v1: &[C64], v2: &[C64]) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..w.len() {
        acc += (u1[j] * v1[j] + u2[j] * v2[j]) * w[j];
    }
    acc
}
