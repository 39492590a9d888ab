//! Finite-rank Gauss kernels: Donsker's delta, `T`-transforms of
//! `exp(−½⟨ω, Kω⟩)`-type functionals, their Monte Carlo check, and the
//! normalized exponential.
//!
//! The Gaussian measure enters only through finitely many coordinates
//! `⟨eₙ, ω⟩`, which are i.i.d. standard normal.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::exec::{map_indexed, Strategy};
use crate::grid::{pair, GridFunctionPair};
use crate::operators::BlockOperator;
use crate::{Error, Result, C64};

/// Samples per Monte Carlo block; block `b` draws from ChaCha8 stream `b`.
pub const MC_BLOCK: usize = 4096;

/// Minimum Monte Carlo sample count.
pub const MC_MIN_SAMPLES: usize = 100;

/// Diagonal trace-class kernel `K = Σ kₙ eₙ ⊗ eₙ` with `kₙ ∈ (−½, 0]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteRankKernel {
    eigenvalues: Vec<f64>,
}

impl FiniteRankKernel {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if let Some(k) = eigenvalues.iter().find(|&&k| !(k > -0.5 && k <= 0.0)) {
            return Err(Error::invalid(format!("kernel eigenvalue {k} outside (−1/2, 0]")));
        }
        Ok(Self { eigenvalues })
    }

    pub fn zero(rank: usize) -> Self {
        Self {
            eigenvalues: vec![0.0; rank],
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `det(Id + 2K)^{−1/2}`, the exact value of the Gaussian expectation
    /// of `exp(−⟨ω, Kω⟩)`.
    pub fn gaussian_expectation(&self) -> f64 {
        self.eigenvalues.iter().map(|k| (1.0 + 2.0 * k).powf(-0.5)).product()
    }
}

/// `T`-transform of Donsker's delta `δ(⟨·, η⟩ − x)`:
/// `(2π⟨η,η⟩)^{−1/2} exp(−(i⟨η,f⟩ − x)² / (2⟨η,η⟩) − ½⟨f,f⟩)`.
#[allow(non_snake_case)]
pub fn donsker_T(eta_norm_sq: f64, eta_dot_f: C64, f_norm_sq: C64, x: f64) -> Result<C64> {
    if !(eta_norm_sq.is_finite() && eta_norm_sq > 0.0) {
        return Err(Error::invalid(format!("⟨η,η⟩ must be positive, got {eta_norm_sq}")));
    }
    let shift = C64::new(0.0, 1.0) * eta_dot_f - x;
    Ok((-(shift * shift) / (2.0 * eta_norm_sq) - 0.5 * f_norm_sq).exp() / (2.0 * PI * eta_norm_sq).sqrt())
}

/// `det(Id + K)^{−1/2} exp(−½(f, (Id + K)⁻¹ f))` with `f = Σ fₙ eₙ + f⊥`;
/// `f_residual_norm_sq` is `⟨f⊥, f⊥⟩`, on which `K` acts as zero.
#[allow(non_snake_case)]
pub fn finite_rank_T(k: &FiniteRankKernel, f_coeffs: &[C64], f_residual_norm_sq: C64) -> Result<C64> {
    check_rank(k.rank(), f_coeffs.len())?;
    let det: f64 = k.eigenvalues.iter().map(|kn| 1.0 + kn).product();
    let exponent: C64 = quadratic_exponent(k.eigenvalues.iter().map(|&kn| C64::new(kn, 0.0)), f_coeffs)? + f_residual_norm_sq;
    Ok((-0.5 * exponent).exp() / det.sqrt())
}

fn check_rank(rank: usize, len: usize) -> Result<()> {
    if rank == len {
        Ok(())
    } else {
        Err(Error::invalid(format!("kernel has rank {rank} but {len} coefficients were given")))
    }
}

/// `Σ fₙ² / (1 + kₙ)` in the bilinear pairing.
fn quadratic_exponent(ks: impl Iterator<Item = C64>, f: &[C64]) -> Result<C64> {
    let mut acc = C64::new(0.0, 0.0);
    for (kn, fn_) in ks.zip(f) {
        let d = C64::new(1.0, 0.0) + kn;
        if d.norm() < 1e-14 {
            return Err(Error::NearSingular {
                context: format!("1 + k = {d} in the normalized exponential"),
                condition: f64::INFINITY,
            });
        }
        acc += fn_ * fn_ / d;
    }
    Ok(acc)
}

/// Normalized exponential for a diagonal `(Id + K)` on a finite basis
/// (complex eigenvalues allowed): `exp(−½[Σ fₙ²/(1 + kₙ) + ⟨f⊥, f⊥⟩])`.
#[allow(non_snake_case)]
pub fn normalized_exp_T(k_eigenvalues: &[C64], f_coeffs: &[C64], f_residual_norm_sq: C64) -> Result<C64> {
    check_rank(k_eigenvalues.len(), f_coeffs.len())?;
    let e = quadratic_exponent(k_eigenvalues.iter().copied(), f_coeffs)? + f_residual_norm_sq;
    Ok((-0.5 * e).exp())
}

/// Normalized exponential for `Id + K` given as a grid operator:
/// `exp(−½ (f, (Id + K)⁻¹ f))`.
#[allow(non_snake_case)]
pub fn normalized_exp_T_operator(id_plus_k: &BlockOperator, f: &GridFunctionPair) -> Result<C64> {
    let inv = id_plus_k.inverse()?;
    let q = pair(f, &inv.apply(f)?)?;
    Ok((-0.5 * q).exp())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub blocks: usize,
    pub seed: u64,
    /// `det(Id + 2K)^{−1/2}`.
    pub exact: f64,
}

impl MonteCarloEstimate {
    /// `|mean − exact|` in units of the standard error.
    pub fn z_score(&self) -> f64 {
        if self.std_error > 0.0 {
            (self.mean - self.exact).abs() / self.std_error
        } else if self.mean == self.exact {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Copy)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    const EMPTY: Self = Self {
        count: 0.0,
        mean: 0.0,
        m2: 0.0,
    };

    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let d = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + d * other.count / count,
            m2: self.m2 + other.m2 + d * d * self.count * other.count / count,
        }
    }
}

/// Monte Carlo estimate of `E[exp(−Σ kₙ Zₙ²)]`, `Zₙ` i.i.d. standard normal.
///
/// Sample `i` belongs to block `i / MC_BLOCK`; blocks are reduced in index
/// order, so the result is bit-identical for any strategy or thread count.
pub fn montecarlo_gauss_expectation(
    k: &FiniteRankKernel,
    samples: usize,
    seed: u64,
    strategy: Strategy,
) -> Result<MonteCarloEstimate> {
    if samples < MC_MIN_SAMPLES {
        return Err(Error::invalid(format!("need at least {MC_MIN_SAMPLES} samples, got {samples}")));
    }
    let blocks = samples.div_ceil(MC_BLOCK);
    let partial = map_indexed(strategy, blocks, |b| {
        let len = MC_BLOCK.min(samples - b * MC_BLOCK);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut m = Moments::EMPTY;
        for _ in 0..len {
            let q: f64 = k
                .eigenvalues
                .iter()
                .map(|kn| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    kn * z * z
                })
                .sum();
            m.push((-q).exp());
        }
        m
    });
    let total = partial.into_iter().fold(Moments::EMPTY, Moments::merge);
    let n = total.count;
    let variance = if n > 1.0 { total.m2 / (n - 1.0) } else { 0.0 };
    Ok(MonteCarloEstimate {
        mean: total.mean,
        std_error: (variance / n).sqrt(),
        samples,
        blocks,
        seed,
        exact: k.gaussian_expectation(),
    })
}
