//! Discretized Volterra operator, its pairing-adjoint, and the block
//! operators `K`, `L`, `N = Id + K + L`.
//!
//! `A` is the midpoint-consistent cumulative integral: full weight for earlier
//! nodes, half weight on the diagonal. With uniform weights its pairing-adjoint
//! is the transpose, so `A − A*` is exactly antisymmetric and the generator
//! `B = L(Id + K)⁻¹ = [[0, k(A* − A)], [k(A − A*), 0]]` is exactly real symmetric.

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::grid::{pair, Grid, GridFunctionPair};
use crate::{Error, Result, C64, I};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Physical parameters with `ħ = m = 1`: coupling `k = qH₃/c` and duration `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagneticModel {
    k: f64,
    t: f64,
}

impl MagneticModel {
    pub fn new(k: f64, t: f64) -> Result<Self> {
        if !k.is_finite() {
            return Err(Error::invalid(format!("coupling k must be finite, got {k}")));
        }
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::invalid(format!("duration t must be positive, got {t}")));
        }
        Ok(Self { k, t })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn kt(&self) -> f64 {
        self.k * self.t
    }

    /// Same coupling, different duration.
    pub fn with_t(&self, t: f64) -> Result<Self> {
        Self::new(self.k, t)
    }

    /// The midpoint grid over this model's interval.
    pub fn grid(&self, n: usize) -> Result<Grid> {
        crate::grid::make_grid(self.t, n)
    }

    pub(crate) fn check_grid(&self, g: &Grid) -> Result<()> {
        if (g.t() - self.t).abs() <= 1e-12 * self.t {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "grid covers [0, {}) but the model has t = {}",
                g.t(),
                self.t
            )))
        }
    }
}

/// One `n × n` block of a [`BlockOperator`].
#[derive(Debug, Clone)]
pub enum Block {
    Zero,
    /// `c · Id`
    Scaled(C64),
    Dense(Mat<C64>),
}

impl Block {
    fn entry(&self, i: usize, j: usize) -> C64 {
        match self {
            Block::Zero => ZERO,
            Block::Scaled(c) => {
                if i == j {
                    *c
                } else {
                    ZERO
                }
            }
            Block::Dense(m) => m[(i, j)],
        }
    }

    fn add(&self, other: &Block, n: usize) -> Block {
        match (self, other) {
            (Block::Zero, b) | (b, Block::Zero) => b.clone(),
            (Block::Scaled(a), Block::Scaled(b)) => Block::Scaled(a + b),
            (Block::Scaled(a), Block::Dense(d)) | (Block::Dense(d), Block::Scaled(a)) => {
                let mut d = d.clone();
                for i in 0..n {
                    d[(i, i)] += *a;
                }
                Block::Dense(d)
            }
            (Block::Dense(a), Block::Dense(b)) => Block::Dense(a + b),
        }
    }

    fn mul(&self, other: &Block) -> Block {
        match (self, other) {
            (Block::Zero, _) | (_, Block::Zero) => Block::Zero,
            (Block::Scaled(a), Block::Scaled(b)) => Block::Scaled(a * b),
            (Block::Scaled(a), Block::Dense(d)) | (Block::Dense(d), Block::Scaled(a)) => {
                Block::Dense(scale_mat(d, *a))
            }
            (Block::Dense(a), Block::Dense(b)) => Block::Dense(a * b),
        }
    }

    fn scale(&self, c: C64) -> Block {
        match self {
            Block::Zero => Block::Zero,
            Block::Scaled(a) => Block::Scaled(a * c),
            Block::Dense(d) => Block::Dense(scale_mat(d, c)),
        }
    }

    fn apply_into(&self, x: &[C64], out: &mut [C64]) {
        match self {
            Block::Zero => {}
            Block::Scaled(c) => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o += c * xi;
                }
            }
            Block::Dense(m) => {
                let n = x.len();
                for j in 0..n {
                    let xj = x[j];
                    if xj == ZERO {
                        continue;
                    }
                    let col = m.col(j);
                    for i in 0..n {
                        out[i] += col[i] * xj;
                    }
                }
            }
        }
    }

    fn max_abs(&self) -> (f64, f64) {
        match self {
            Block::Zero => (0.0, 0.0),
            Block::Scaled(c) => (c.norm(), c.im.abs()),
            Block::Dense(m) => {
                let mut all = 0.0f64;
                let mut im = 0.0f64;
                for j in 0..m.ncols() {
                    for z in m.col(j).iter() {
                        all = all.max(z.norm());
                        im = im.max(z.im.abs());
                    }
                }
                (all, im)
            }
        }
    }
}

fn scale_mat(m: &Mat<C64>, c: C64) -> Mat<C64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * c)
}

/// A 2×2 block operator on the discretized two-component space.
///
/// Blocks are stored structurally (zero, scaled identity, or dense), which keeps
/// `K` and `Id` free; [`BlockOperator::to_dense`] gives the `2n × 2n` matrix.
#[derive(Debug, Clone)]
pub struct BlockOperator {
    grid: Grid,
    blocks: [[Block; 2]; 2],
}

impl BlockOperator {
    pub fn new(grid: &Grid, blocks: [[Block; 2]; 2]) -> Result<Self> {
        let n = grid.n();
        for row in &blocks {
            for b in row {
                if let Block::Dense(m) = b {
                    if m.nrows() != n || m.ncols() != n {
                        return Err(Error::invalid(format!(
                            "dense block is {}×{}, grid needs {n}×{n}",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                }
            }
        }
        Ok(Self {
            grid: grid.clone(),
            blocks,
        })
    }

    pub fn scaled_identity(grid: &Grid, c: C64) -> Self {
        Self {
            grid: grid.clone(),
            blocks: [[Block::Scaled(c), Block::Zero], [Block::Zero, Block::Scaled(c)]],
        }
    }

    pub fn identity(grid: &Grid) -> Self {
        Self::scaled_identity(grid, ONE)
    }

    pub fn zero(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            blocks: [[Block::Zero, Block::Zero], [Block::Zero, Block::Zero]],
        }
    }

    /// Splits a dense `2n × 2n` matrix into blocks.
    pub fn from_dense(grid: &Grid, m: &Mat<C64>) -> Result<Self> {
        let n = grid.n();
        if m.nrows() != 2 * n || m.ncols() != 2 * n {
            return Err(Error::invalid(format!(
                "dense operator is {}×{}, grid needs {}×{}",
                m.nrows(),
                m.ncols(),
                2 * n,
                2 * n
            )));
        }
        let blk = |r: usize, c: usize| Block::Dense(Mat::from_fn(n, n, |i, j| m[(r * n + i, c * n + j)]));
        Ok(Self {
            grid: grid.clone(),
            blocks: [[blk(0, 0), blk(0, 1)], [blk(1, 0), blk(1, 1)]],
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Dimension `2n`.
    pub fn dim(&self) -> usize {
        2 * self.grid.n()
    }

    pub fn block(&self, row: usize, col: usize) -> &Block {
        &self.blocks[row][col]
    }

    /// Entry of the `2n × 2n` matrix.
    pub fn entry(&self, row: usize, col: usize) -> C64 {
        let n = self.grid.n();
        self.blocks[row / n][col / n].entry(row % n, col % n)
    }

    pub fn to_dense(&self) -> Mat<C64> {
        Mat::from_fn(self.dim(), self.dim(), |i, j| self.entry(i, j))
    }

    pub fn apply(&self, f: &GridFunctionPair) -> Result<GridFunctionPair> {
        self.grid.ensure_same(f.grid())?;
        let n = self.grid.n();
        let mut out1 = vec![ZERO; n];
        let mut out2 = vec![ZERO; n];
        self.blocks[0][0].apply_into(f.comp1(), &mut out1);
        self.blocks[0][1].apply_into(f.comp2(), &mut out1);
        self.blocks[1][0].apply_into(f.comp1(), &mut out2);
        self.blocks[1][1].apply_into(f.comp2(), &mut out2);
        GridFunctionPair::new(&self.grid, out1, out2)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let n = self.grid.n();
        let b = |r: usize, c: usize| self.blocks[r][c].add(&other.blocks[r][c], n);
        Ok(Self {
            grid: self.grid.clone(),
            blocks: [[b(0, 0), b(0, 1)], [b(1, 0), b(1, 1)]],
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-ONE))
    }

    pub fn scale(&self, c: C64) -> Self {
        let b = |r: usize, col: usize| self.blocks[r][col].scale(c);
        Self {
            grid: self.grid.clone(),
            blocks: [[b(0, 0), b(0, 1)], [b(1, 0), b(1, 1)]],
        }
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let n = self.grid.n();
        let b = |r: usize, c: usize| {
            let a = self.blocks[r][0].mul(&other.blocks[0][c]);
            let d = self.blocks[r][1].mul(&other.blocks[1][c]);
            a.add(&d, n)
        };
        Ok(Self {
            grid: self.grid.clone(),
            blocks: [[b(0, 0), b(0, 1)], [b(1, 0), b(1, 1)]],
        })
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|b| match b {
            Block::Zero => true,
            Block::Scaled(c) => *c == ZERO,
            Block::Dense(_) => b.max_abs().0 == 0.0,
        })
    }

    /// Largest entry modulus and largest imaginary part.
    pub fn magnitudes(&self) -> (f64, f64) {
        self.blocks
            .iter()
            .flatten()
            .map(Block::max_abs)
            .fold((0.0, 0.0), |(a, b), (c, d)| (a.max(c), b.max(d)))
    }

    /// The diagonal scalars when the operator is block-diagonal with
    /// scaled-identity blocks.
    pub fn as_diagonal_scalars(&self) -> Option<(C64, C64)> {
        let off_zero = |b: &Block| matches!(b, Block::Zero) || matches!(b, Block::Scaled(c) if *c == ZERO);
        if !off_zero(&self.blocks[0][1]) || !off_zero(&self.blocks[1][0]) {
            return None;
        }
        let diag = |b: &Block| match b {
            Block::Zero => Some(ZERO),
            Block::Scaled(c) => Some(*c),
            Block::Dense(_) => None,
        };
        Some((diag(&self.blocks[0][0])?, diag(&self.blocks[1][1])?))
    }

    /// The real `2n × 2n` matrix when every imaginary part is below
    /// `rel_tol · max|entry|`.
    pub fn as_real_dense(&self, rel_tol: f64) -> Option<Mat<f64>> {
        let (all, im) = self.magnitudes();
        if im > rel_tol * all {
            return None;
        }
        Some(Mat::from_fn(self.dim(), self.dim(), |i, j| self.entry(i, j).re))
    }

    /// Inverse operator. Block-diagonal scalar operators invert in closed form;
    /// anything else goes through a dense LU.
    pub fn inverse(&self) -> Result<Self> {
        if let Some((a, d)) = self.as_diagonal_scalars() {
            if a.norm() < 1e-300 || d.norm() < 1e-300 {
                return Err(Error::NearSingular {
                    context: "block-diagonal operator with a zero block".into(),
                    condition: f64::INFINITY,
                });
            }
            return Ok(Self {
                grid: self.grid.clone(),
                blocks: [[Block::Scaled(ONE / a), Block::Zero], [Block::Zero, Block::Scaled(ONE / d)]],
            });
        }
        let dense = self.to_dense();
        let lu = dense.partial_piv_lu();
        let inv = lu.inverse();
        if inv.col_iter().flat_map(|c| c.iter().copied().collect::<Vec<_>>()).any(|z| !z.is_finite()) {
            return Err(Error::NearSingular {
                context: "dense block operator inverse".into(),
                condition: f64::INFINITY,
            });
        }
        Self::from_dense(&self.grid, &inv)
    }
}

/// Discrete `A`: `A_jl = w_l` for `l < j`, `w_j/2` on the diagonal.
pub fn volterra(g: &Grid) -> Mat<C64> {
    let w = g.weights();
    Mat::from_fn(g.n(), g.n(), |j, l| {
        C64::new(
            match l.cmp(&j) {
                std::cmp::Ordering::Less => w[l],
                std::cmp::Ordering::Equal => 0.5 * w[j],
                std::cmp::Ordering::Greater => 0.0,
            },
            0.0,
        )
    })
}

/// Exact pairing-adjoint of the discrete `A`: `(A*)_jl = (w_l / w_j) A_lj`.
pub fn volterra_adjoint(g: &Grid) -> Mat<C64> {
    let a = volterra(g);
    let w = g.weights();
    Mat::from_fn(g.n(), g.n(), |j, l| a[(l, j)] * (w[l] / w[j]))
}

/// `(A f)` at the nodes in O(n), same rule as [`volterra`].
pub fn cumulative_integral(g: &Grid, f: &[C64]) -> Vec<C64> {
    let w = g.weights();
    let mut acc = ZERO;
    f.iter()
        .zip(w)
        .map(|(&fj, &wj)| {
            let v = acc + fj * (0.5 * wj);
            acc += fj * wj;
            v
        })
        .collect()
}

/// `K = −(1 + i) P_[0,t)`; on the grid `P` is the identity.
#[allow(non_snake_case)]
pub fn free_K(m: &MagneticModel, g: &Grid) -> Result<BlockOperator> {
    m.check_grid(g)?;
    Ok(BlockOperator::scaled_identity(g, -(ONE + I)))
}

/// `L = [[0, ik(A − A*)], [ik(A* − A), 0]]`.
#[allow(non_snake_case)]
pub fn magnetic_L(m: &MagneticModel, g: &Grid) -> Result<BlockOperator> {
    m.check_grid(g)?;
    if m.k() == 0.0 {
        return Ok(BlockOperator::zero(g));
    }
    let a = volterra(g);
    let astar = volterra_adjoint(g);
    let ik = I * m.k();
    let diff = &a - &astar;
    let top = scale_mat(&diff, ik);
    let bottom = scale_mat(&diff, -ik);
    BlockOperator::new(g, [[Block::Zero, Block::Dense(top)], [Block::Dense(bottom), Block::Zero]])
}

/// `N = Id + K + L`.
#[allow(non_snake_case)]
pub fn build_N(m: &MagneticModel, g: &Grid) -> Result<BlockOperator> {
    BlockOperator::identity(g).add(&free_K(m, g)?)?.add(&magnetic_L(m, g)?)
}

/// `⟨f, B f⟩` in the bilinear pairing.
pub fn quadratic_form(b: &BlockOperator, f: &GridFunctionPair) -> Result<C64> {
    let bf = b.apply(f)?;
    pair(f, &bf)
}

/// Direct quadrature of `−ik ∫₀ᵗ (∫₀^τ f₁ · f₂(τ) − f₁(τ) ∫₀^τ f₂) dτ`, the
/// value of `½⟨f, L f⟩`.
pub fn potential_form_direct(m: &MagneticModel, f: &GridFunctionPair) -> Result<C64> {
    m.check_grid(f.grid())?;
    let g = f.grid();
    let a1 = cumulative_integral(g, f.comp1());
    let a2 = cumulative_integral(g, f.comp2());
    let mut acc = ZERO;
    for j in 0..g.n() {
        acc += (a1[j] * f.comp2()[j] - f.comp1()[j] * a2[j]) * g.weights()[j];
    }
    Ok(-I * m.k() * acc)
}

/// Real `2n × 2n` matrix of `B = L (Id + K)⁻¹ = [[0, k(A* − A)], [k(A − A*), 0]]`.
pub fn resolvent_generator(m: &MagneticModel, g: &Grid) -> Result<Mat<f64>> {
    m.check_grid(g)?;
    let n = g.n();
    let w = g.weights();
    let k = m.k();
    // (A − A*)_{ij} with uniform weights
    let c = |i: usize, j: usize| -> f64 {
        match j.cmp(&i) {
            std::cmp::Ordering::Less => w[j],
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Greater => -w[i] * (w[j] / w[i]),
        }
    };
    Ok(Mat::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, false) => k * -c(i, j - n),
        (false, true) => k * c(i - n, j),
        _ => 0.0,
    }))
}

/// Applies a real `2n × 2n` matrix (such as [`resolvent_generator`]) to a pair.
pub fn apply_real(b: &Mat<f64>, f: &GridFunctionPair) -> Result<GridFunctionPair> {
    let x = f.stacked();
    if b.nrows() != x.len() || b.ncols() != x.len() {
        return Err(Error::GridMismatch(format!(
            "matrix is {}×{}, vector has length {}",
            b.nrows(),
            b.ncols(),
            x.len()
        )));
    }
    let mut out = vec![ZERO; x.len()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == ZERO {
            continue;
        }
        let col = b.col(j);
        for (o, &bij) in out.iter_mut().zip(col.iter()) {
            *o += xj * bij;
        }
    }
    GridFunctionPair::from_stacked(f.grid(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, sample, sample_real};

    fn model(k: f64, t: f64) -> MagneticModel {
        MagneticModel::new(k, t).unwrap()
    }

    fn apply_mat(m: &Mat<C64>, x: &[C64]) -> Vec<C64> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
            .collect()
    }

    fn real_vec(x: &[C64]) -> Vec<f64> {
        x.iter().map(|z| z.re).collect()
    }

    #[test]
    fn volterra_integrates_constants() {
        let g = make_grid(1.0, 64).unwrap();
        let ones = vec![ONE; 64];
        let a1 = apply_mat(&volterra(&g), &ones);
        for (v, s) in real_vec(&a1).iter().zip(g.nodes()) {
            assert!((v - s).abs() <= 1.0 / (2.0 * 64.0));
        }
        let s: Vec<f64> = g.nodes().iter().map(|&s| 2.0 * s).collect();
        let fs: Vec<C64> = s.iter().map(|&x| C64::new(x, 0.0)).collect();
        let big = make_grid(1.0, 400).unwrap();
        let fs_big: Vec<C64> = big.nodes().iter().map(|&s| C64::new(2.0 * s, 0.0)).collect();
        let af = cumulative_integral(&big, &fs_big);
        for (v, s) in af.iter().zip(big.nodes()) {
            assert!((v.re - s * s).abs() < 1e-5);
        }
        assert_eq!(fs.len(), 64);
    }

    #[test]
    fn single_node_half_diagonal() {
        let g = crate::grid::build(1.0, 1);
        assert_eq!(volterra(&g)[(0, 0)], C64::new(0.5, 0.0));
    }

    #[test]
    fn adjoint_integrates_to_the_end() {
        let g = make_grid(1.0, 64).unwrap();
        let ones = vec![ONE; 64];
        let a = apply_mat(&volterra(&g), &ones);
        let astar = apply_mat(&volterra_adjoint(&g), &ones);
        for ((av, bv), s) in a.iter().zip(&astar).zip(g.nodes()) {
            assert!((bv.re - (1.0 - s)).abs() <= 1.0 / 128.0);
            assert!((av.re + bv.re - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cumulative_matches_matrix() {
        let g = make_grid(0.8, 30).unwrap();
        let f: Vec<C64> = g.nodes().iter().map(|&s| C64::new(s.sin(), s * s)).collect();
        let a = apply_mat(&volterra(&g), &f);
        let b = cumulative_integral(&g, &f);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn free_k_examples() {
        let m = model(1.0, 1.0);
        let g = make_grid(1.0, 16).unwrap();
        let k = free_K(&m, &g).unwrap();
        let e1 = sample(|_| ONE, |_| ZERO, &g);
        let q = quadratic_form(&k, &e1).unwrap();
        assert!((q + (ONE + I)).norm() < 1e-14);
        for i in 0..32 {
            for j in 0..32 {
                if i != j {
                    assert_eq!(k.entry(i, j), ZERO);
                }
            }
        }
        let idk = BlockOperator::identity(&g).add(&k).unwrap();
        assert_eq!(idk.as_diagonal_scalars(), Some((-I, -I)));
    }

    #[test]
    fn magnetic_l_examples() {
        let g = make_grid(1.0, 400).unwrap();
        assert!(magnetic_L(&model(0.0, 1.0), &g).unwrap().is_zero());
        let m = model(1.0, 1.0);
        let l = magnetic_L(&m, &g).unwrap();
        let f = sample_real(|_| 1.0, |s| s, &g);
        let q = quadratic_form(&l, &f).unwrap();
        // ⟨f, L f⟩ = −2ik/6; half of it is the potential term −i/6
        assert!((q - C64::new(0.0, -1.0 / 3.0)).norm() < 1e-5, "{q}");
        assert!((0.5 * q - C64::new(0.0, -1.0 / 6.0)).norm() < 1e-5);
    }

    #[test]
    fn potential_form_examples() {
        let g = make_grid(1.0, 400).unwrap();
        let m = model(1.0, 1.0);
        let f = sample_real(|_| 1.0, |_| 1.0, &g);
        assert!(potential_form_direct(&m, &f).unwrap().norm() < 1e-15);
        let f = sample_real(|_| 1.0, |s| s, &g);
        let v = potential_form_direct(&m, &f).unwrap();
        assert!((v - C64::new(0.0, -1.0 / 6.0)).norm() < 1e-5, "{v}");
        let m0 = model(0.0, 1.0);
        assert_eq!(potential_form_direct(&m0, &f).unwrap(), ZERO);
    }

    #[test]
    fn form_identity_is_second_order() {
        let m = model(0.7, 1.3);
        let f1 = |s: f64| (2.0 * s).cos() + 0.3 * s;
        let f2 = |s: f64| (-(s - 0.6).powi(2)).exp();
        let gap = |n| {
            let g = make_grid(1.3, n).unwrap();
            let f = sample_real(f1, f2, &g);
            let half = 0.5 * quadratic_form(&magnetic_L(&m, &g).unwrap(), &f).unwrap();
            (half - potential_form_direct(&m, &f).unwrap()).norm()
        };
        // both sides use the same discrete A, so they agree to rounding
        assert!(gap(100) < 1e-13);
        assert!(gap(200) < 1e-13);
    }

    #[test]
    fn n_structure() {
        let g = make_grid(1.0, 12).unwrap();
        let m0 = model(0.0, 1.0);
        let n0 = build_N(&m0, &g).unwrap();
        assert_eq!(n0.as_diagonal_scalars(), Some((-I, -I)));

        let m = model(0.9, 1.0);
        let n = build_N(&m, &g).unwrap();
        let check = n
            .sub(&BlockOperator::identity(&g).add(&free_K(&m, &g).unwrap()).unwrap())
            .unwrap()
            .sub(&magnetic_L(&m, &g).unwrap())
            .unwrap();
        assert_eq!(check.magnitudes().0, 0.0);

        // i N = Id + B
        let rot = n.scale(I);
        let b = resolvent_generator(&m, &g).unwrap();
        for i in 0..24 {
            for j in 0..24 {
                let expect = b[(i, j)] + if i == j { 1.0 } else { 0.0 };
                assert!((rot.entry(i, j) - expect).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn generator_is_product_with_resolvent_of_id_plus_k() {
        let g = make_grid(1.0, 10).unwrap();
        let m = model(1.3, 1.0);
        let idk_inv = BlockOperator::identity(&g)
            .add(&free_K(&m, &g).unwrap())
            .unwrap()
            .inverse()
            .unwrap();
        let c = magnetic_L(&m, &g).unwrap().mul(&idk_inv).unwrap();
        let b = resolvent_generator(&m, &g).unwrap();
        let real = c.as_real_dense(0.0).expect("exactly real");
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(real[(i, j)], b[(i, j)]);
                assert_eq!(b[(i, j)], b[(j, i)]);
            }
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g = make_grid(2.0, 10).unwrap();
        assert!(matches!(free_K(&model(1.0, 1.0), &g), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn dense_inverse_round_trip() {
        let g = make_grid(1.0, 6).unwrap();
        let m = model(1.1, 1.0);
        let n = build_N(&m, &g).unwrap();
        let dense = BlockOperator::from_dense(&g, &n.to_dense()).unwrap();
        let inv = dense.inverse().unwrap();
        let prod = inv.mul(&n).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let e = if i == j { ONE } else { ZERO };
                assert!((prod.entry(i, j) - e).norm() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn to_pair(g: &Grid, raw: &[(f64, f64)]) -> GridFunctionPair {
            let z: Vec<C64> = raw.iter().map(|&(a, b)| C64::new(a, b)).collect();
            GridFunctionPair::from_stacked(g, &z).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn adjointness(a in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 16),
                           b in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 16)) {
                let g = make_grid(1.7, 8).unwrap();
                let u = to_pair(&g, &a);
                let v = to_pair(&g, &b);
                let amat = volterra(&g);
                let astar = volterra_adjoint(&g);
                let av = GridFunctionPair::new(&g, apply_mat(&amat, v.comp1()), apply_mat(&amat, v.comp2())).unwrap();
                let au = GridFunctionPair::new(&g, apply_mat(&astar, u.comp1()), apply_mat(&astar, u.comp2())).unwrap();
                let lhs = pair(&u, &av).unwrap();
                let rhs = pair(&au, &v).unwrap();
                prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
            }

            #[test]
            fn l_is_pairing_symmetric(a in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 16),
                                      b in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 16),
                                      k in -2.0..2.0f64) {
                let g = make_grid(1.0, 8).unwrap();
                let l = magnetic_L(&model(k, 1.0), &g).unwrap();
                let u = to_pair(&g, &a);
                let v = to_pair(&g, &b);
                let lhs = pair(&u, &l.apply(&v).unwrap()).unwrap();
                let rhs = pair(&v, &l.apply(&u).unwrap()).unwrap();
                prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + lhs.norm()));
            }
        }
    }
}
