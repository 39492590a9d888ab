//! Seeded Schwartz-class test-function pairs and the indicator generators.
//!
//! A spec serializes as `kind:key=value,...`, for example
//! `gaussian_bump:amplitude=1,center=0.5,width=0.05,component=1`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{sample_real, Grid, GridFunctionPair};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunctionKind {
    /// `a exp(−(s − c)² / σ²)`.
    GaussianBump,
    /// Normalized Hermite function `a hₘ((s − c)/σ)`, `hₘ(x) = Hₘ(x) e^{−x²/2} / √(2ᵐ m! √π)`.
    Hermite,
    /// `1_[0,t)`.
    Indicator,
}

impl TestFunctionKind {
    fn name(self) -> &'static str {
        match self {
            TestFunctionKind::GaussianBump => "gaussian_bump",
            TestFunctionKind::Hermite => "hermite",
            TestFunctionKind::Indicator => "indicator",
        }
    }
}

/// One scalar function placed in component 1 or 2 of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub kind: TestFunctionKind,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub index: u32,
    pub component: u8,
    /// `(seed, draw)` for specs produced by [`random_specs`].
    pub lineage: Option<(u64, u64)>,
}

impl TestFunctionSpec {
    pub fn gaussian_bump(amplitude: f64, center: f64, width: f64, component: u8) -> Self {
        Self {
            kind: TestFunctionKind::GaussianBump,
            amplitude,
            center,
            width,
            index: 0,
            component,
            lineage: None,
        }
    }

    pub fn hermite(index: u32, amplitude: f64, center: f64, width: f64, component: u8) -> Self {
        Self {
            kind: TestFunctionKind::Hermite,
            index,
            ..Self::gaussian_bump(amplitude, center, width, component)
        }
    }

    pub fn indicator(component: u8) -> Self {
        Self {
            kind: TestFunctionKind::Indicator,
            ..Self::gaussian_bump(1.0, 0.0, 1.0, component)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.component != 1 && self.component != 2 {
            return Err(Error::invalid(format!("component must be 1 or 2, got {}", self.component)));
        }
        if self.kind != TestFunctionKind::Indicator {
            if !(self.width.is_finite() && self.width > 0.0) {
                return Err(Error::invalid(format!("width must be positive, got {}", self.width)));
            }
            if !self.amplitude.is_finite() || !self.center.is_finite() {
                return Err(Error::invalid("amplitude and center must be finite"));
            }
        }
        Ok(())
    }

    /// Value at `s` (the scalar function, before placement into a component).
    pub fn eval(&self, s: f64) -> f64 {
        match self.kind {
            TestFunctionKind::Indicator => 1.0,
            TestFunctionKind::GaussianBump => {
                let x = (s - self.center) / self.width;
                self.amplitude * (-x * x).exp()
            }
            TestFunctionKind::Hermite => self.amplitude * hermite_function(self.index, (s - self.center) / self.width),
        }
    }
}

/// `Hₘ(x) e^{−x²/2} / √(2ᵐ m! √π)` by the stable three-term recursion.
pub fn hermite_function(m: u32, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25) * (-0.5 * x * x).exp();
    for j in 0..m {
        let j = j as f64;
        let next = (2.0 / (j + 1.0)).sqrt() * x * cur - (j / (j + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

impl fmt::Display for TestFunctionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.kind.name())?;
        match self.kind {
            TestFunctionKind::Indicator => write!(f, "component={}", self.component)?,
            TestFunctionKind::GaussianBump => write!(
                f,
                "amplitude={},center={},width={},component={}",
                self.amplitude, self.center, self.width, self.component
            )?,
            TestFunctionKind::Hermite => write!(
                f,
                "index={},amplitude={},center={},width={},component={}",
                self.index, self.amplitude, self.center, self.width, self.component
            )?,
        }
        if let Some((seed, draw)) = self.lineage {
            write!(f, ",seed={seed},draw={draw}")?;
        }
        Ok(())
    }
}

impl FromStr for TestFunctionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("test function `{s}`: {msg}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = match kind.trim() {
            "gaussian_bump" => Self::gaussian_bump(1.0, f64::NAN, f64::NAN, 1),
            "hermite" => Self::hermite(0, 1.0, f64::NAN, f64::NAN, 1),
            "indicator" => Self::indicator(1),
            other => return Err(bad(format!("unknown kind `{other}`"))),
        };
        let mut seed = None;
        let mut draw = None;
        for item in rest.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (key, value) = item.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{item}`")))?;
            let num = || value.trim().parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            let int = || value.trim().parse::<u64>().map_err(|e| bad(format!("{key}: {e}")));
            match key.trim() {
                "amplitude" => spec.amplitude = num()?,
                "center" => spec.center = num()?,
                "width" => spec.width = num()?,
                "index" => spec.index = int()? as u32,
                "component" => spec.component = int()? as u8,
                "seed" => seed = Some(int()?),
                "draw" => draw = Some(int()?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        spec.lineage = match (seed, draw) {
            (Some(s), Some(d)) => Some((s, d)),
            (None, None) => None,
            _ => return Err(bad("seed and draw must be given together".into())),
        };
        if spec.kind != TestFunctionKind::Indicator && (spec.center.is_nan() || spec.width.is_nan()) {
            return Err(bad("center and width are required".into()));
        }
        spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(spec)
    }
}

/// Samples one spec into its component; the other component is zero.
pub fn generate(spec: &TestFunctionSpec, g: &Grid) -> Result<GridFunctionPair> {
    spec.validate()?;
    let s = *spec;
    Ok(if spec.component == 1 {
        sample_real(move |x| s.eval(x), |_| 0.0, g)
    } else {
        sample_real(|_| 0.0, move |x| s.eval(x), g)
    })
}

/// Sum of several specs on one grid.
pub fn generate_sum(specs: &[TestFunctionSpec], g: &Grid) -> Result<GridFunctionPair> {
    specs
        .iter()
        .try_fold(GridFunctionPair::zeros(g), |acc, s| acc.add(&generate(s, g)?))
}

/// Parameter draws for [`random_suite`]: per pair, one bump in each
/// component with centre in `[0.35t, 0.65t]`, width in `[0.04t, 0.06t]` and
/// amplitude `±[0.5, 1.5]`. Draw `j` uses ChaCha8 stream `j` of `seed`.
pub fn random_specs(seed: u64, count: usize, t: f64) -> Result<Vec<[TestFunctionSpec; 2]>> {
    if count == 0 {
        return Err(Error::invalid("suite count must be at least 1"));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::invalid(format!("duration t must be positive, got {t}")));
    }
    Ok((0..count as u64)
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw);
            let mut one = |component: u8| {
                let center = rng.random_range(0.35 * t..=0.65 * t);
                let width = rng.random_range(0.04 * t..=0.06 * t);
                let magnitude = rng.random_range(0.5..=1.5);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                TestFunctionSpec {
                    lineage: Some((seed, draw)),
                    ..TestFunctionSpec::gaussian_bump(sign * magnitude, center, width, component)
                }
            };
            [one(1), one(2)]
        })
        .collect())
}

/// Reproducible list of Gaussian-bump pairs, see [`random_specs`].
pub fn random_suite(seed: u64, count: usize, g: &Grid) -> Result<Vec<GridFunctionPair>> {
    random_specs(seed, count, g.t())?
        .iter()
        .map(|pair| generate_sum(pair, g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use proptest::prelude::*;

    #[test]
    fn indicator_samples() {
        let g = make_grid(2.0, 5).unwrap();
        let p = generate(&TestFunctionSpec::indicator(1), &g).unwrap();
        assert!(p.comp1().iter().all(|z| z.re == 1.0 && z.im == 0.0));
        assert!(p.comp2().iter().all(|z| z.norm() == 0.0));
        let p = generate(&TestFunctionSpec::indicator(2), &g).unwrap();
        assert!(p.comp2().iter().all(|z| z.re == 1.0));
    }

    #[test]
    fn bump_is_symmetric_about_the_midpoint() {
        let t = 1.0;
        let g = make_grid(t, 8).unwrap();
        let p = generate(&TestFunctionSpec::gaussian_bump(1.0, t / 2.0, t / 4.0, 1), &g).unwrap();
        let v = p.comp1();
        for j in 0..4 {
            assert!((v[j] - v[7 - j]).norm() < 1e-15);
        }
    }

    #[test]
    fn hermite_zero_is_a_normalized_gaussian() {
        let h = TestFunctionSpec::hermite(0, 1.0, 0.3, 0.1, 1);
        // h₀ with width σ equals π^{−1/4} times the bump with width σ√2
        let b = TestFunctionSpec::gaussian_bump(1.0, 0.3, 0.1 * 2f64.sqrt(), 1);
        for s in [0.1, 0.25, 0.3, 0.47] {
            assert!((h.eval(s) - std::f64::consts::PI.powf(-0.25) * b.eval(s)).abs() < 1e-15);
        }
    }

    #[test]
    fn hermite_functions_are_orthonormal() {
        let n = 4000;
        let (a, b) = (-12.0, 12.0);
        let h = (b - a) / n as f64;
        for m in 0..5 {
            for l in 0..5 {
                let ip: f64 = (0..n)
                    .map(|j| {
                        let x = a + (j as f64 + 0.5) * h;
                        hermite_function(m, x) * hermite_function(l, x) * h
                    })
                    .sum();
                let expect = if m == l { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-10, "m={m} l={l}: {ip}");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let g = make_grid(1.0, 4).unwrap();
        assert!(generate(&TestFunctionSpec::gaussian_bump(1.0, 0.5, 0.0, 1), &g).is_err());
        assert!(generate(&TestFunctionSpec::gaussian_bump(1.0, 0.5, -1.0, 1), &g).is_err());
        assert!(generate(&TestFunctionSpec::gaussian_bump(1.0, 0.5, 0.1, 3), &g).is_err());
        assert!("cosine:width=1".parse::<TestFunctionSpec>().is_err());
        assert!("gaussian_bump:center=0.5".parse::<TestFunctionSpec>().is_err());
        assert!("gaussian_bump:center=0.5,width=0.1,seed=3".parse::<TestFunctionSpec>().is_err());
    }

    #[test]
    fn parse_examples() {
        let s: TestFunctionSpec = "gaussian_bump:amplitude=-0.75,center=0.5,width=0.05,component=2".parse().unwrap();
        assert_eq!(s, TestFunctionSpec::gaussian_bump(-0.75, 0.5, 0.05, 2));
        let s: TestFunctionSpec = "indicator:component=2".parse().unwrap();
        assert_eq!(s, TestFunctionSpec::indicator(2));
        let s: TestFunctionSpec = "hermite:index=3,center=0.4,width=0.1".parse().unwrap();
        assert_eq!(s.index, 3);
        assert_eq!(s.amplitude, 1.0);
    }

    #[test]
    fn suites_are_reproducible() {
        let g = make_grid(1.0, 64).unwrap();
        let a = random_suite(7, 5, &g).unwrap();
        let b = random_suite(7, 5, &g).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let c = random_specs(8, 5, 1.0).unwrap();
        assert_ne!(random_specs(7, 5, 1.0).unwrap(), c);
        assert!(random_suite(7, 0, &g).is_err());
    }

    #[test]
    fn suites_vanish_at_the_boundary() {
        for seed in 0..20 {
            for t in [0.5, 1.0, 3.0] {
                for pair in random_specs(seed, 4, t).unwrap() {
                    for s in pair {
                        assert!(s.eval(0.0).abs() < 1e-12 && s.eval(t).abs() < 1e-12, "{s}");
                        assert!((0.5..=1.5).contains(&s.amplitude.abs()));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn display_round_trips(
            kind in 0u8..3,
            amplitude in -10.0f64..10.0,
            center in -1.0f64..5.0,
            width in 1e-3f64..2.0,
            index in 0u32..8,
            component in 1u8..=2,
            lineage in proptest::option::of((any::<u64>(), any::<u64>())),
        ) {
            let mut spec = match kind {
                0 => TestFunctionSpec::gaussian_bump(amplitude, center, width, component),
                1 => TestFunctionSpec::hermite(index, amplitude, center, width, component),
                _ => TestFunctionSpec::indicator(component),
            };
            spec.lineage = lineage;
            let back: TestFunctionSpec = spec.to_string().parse().unwrap();
            prop_assert_eq!(back, spec);
        }
    }
}
