//! Command-line front end: argument parsing, the flat `key = value` config
//! format, the subcommands and their JSON/CSV reports.
//!
//! Precedence is defaults < config file < command-line flags.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::exec::{map_indexed, Strategy};
use crate::feynman::{
    adjudicate_conventions, caustic_check, closed_propagator, magnetic_T, printed_propagator, propagator,
    free_limit_reference, CausticClass, Convention, MasterProblem, SpatialBox, StepSchedule, TimeSpan,
};
use crate::fredholm::{analytic_gram_diagonal, closed_preimage_f, gram_matrix, indicator_etas, solve_N, verify_preimage};
use crate::operators::MagneticModel;
use crate::report::{complex_value, envelope, to_value};
use crate::spectral::{determinant_report, discrete_spectrum_with, SpectralReport, MATCH_TOLERANCE};
use crate::testfunctions::{generate_sum, random_specs, TestFunctionSpec};
use crate::verify::{self, SuiteInputs};
use crate::{Error, Result};

/// Largest accepted grid size; `B` is dense of size `2n × 2n`.
pub const MAX_GRID_POINTS: usize = 8000;
/// Largest accepted sweep length.
pub const MAX_SWEEP_STEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

impl OutputFormat {
    fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Json => "json",
            OutputFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum SweepParam {
    #[default]
    T,
    K,
    Y1,
    Y2,
    GridPoints,
}

impl SweepParam {
    fn as_str(self) -> &'static str {
        match self {
            SweepParam::T => "t",
            SweepParam::K => "k",
            SweepParam::Y1 => "y1",
            SweepParam::Y2 => "y2",
            SweepParam::GridPoints => "grid-points",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        <SweepParam as ValueEnum>::from_str(s.trim(), false).map_err(|_| Error::Config(format!("unknown sweep parameter `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub from: f64,
    pub to: f64,
    pub steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::T,
            from: 0.1,
            to: 3.0,
            steps: 30,
        }
    }
}

impl SweepConfig {
    /// Evenly spaced values from `from` to `to`, both included.
    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.from];
        }
        (0..self.steps)
            .map(|i| self.from + (self.to - self.from) * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

/// Every input of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: Option<f64>,
    pub t: Option<f64>,
    pub grid_points: usize,
    pub count: usize,
    pub n_max: u64,
    pub y: [f64; 2],
    pub samples: usize,
    pub seed: u64,
    pub output: OutputFormat,
    pub out_file: Option<PathBuf>,
    pub convention: Convention,
    pub quick: bool,
    pub test_functions: Vec<TestFunctionSpec>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: None,
            t: None,
            grid_points: 500,
            count: 10,
            n_max: 100_000,
            y: [0.0, 0.0],
            samples: 100_000,
            seed: 42,
            output: OutputFormat::Json,
            out_file: None,
            convention: Convention::Composed,
            quick: false,
            test_functions: Vec::new(),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

impl RunConfig {
    /// Applies one `key = value` setting. `test-function` appends.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k" => self.k = Some(parse(key, v)?),
            "t" => self.t = Some(parse(key, v)?),
            "grid-points" => self.grid_points = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "n-max" => self.n_max = parse(key, v)?,
            "y1" => self.y[0] = parse(key, v)?,
            "y2" => self.y[1] = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output" => {
                self.output = OutputFormat::from_str(v, false).map_err(|_| Error::Config(format!("output = {v}: expected json or csv")))?
            }
            "out-file" => self.out_file = Some(PathBuf::from(v)),
            "convention" => self.convention = parse(key, v)?,
            "quick" => self.quick = parse(key, v)?,
            "test-function" => self.test_functions.push(parse(key, v)?),
            "sweep-param" => self.sweep.param = parse(key, v)?,
            "sweep-from" => self.sweep.from = parse(key, v)?,
            "sweep-to" => self.sweep.to = parse(key, v)?,
            "sweep-steps" => self.sweep.steps = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", no + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// The config in the flat text format; [`RunConfig::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(k) = self.k {
            let _ = writeln!(s, "k = {k}");
        }
        if let Some(t) = self.t {
            let _ = writeln!(s, "t = {t}");
        }
        let _ = writeln!(s, "grid-points = {}", self.grid_points);
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "n-max = {}", self.n_max);
        let _ = writeln!(s, "y1 = {}", self.y[0]);
        let _ = writeln!(s, "y2 = {}", self.y[1]);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "output = {}", self.output.as_str());
        if let Some(p) = &self.out_file {
            let _ = writeln!(s, "out-file = {}", p.display());
        }
        let _ = writeln!(s, "convention = {}", self.convention);
        let _ = writeln!(s, "quick = {}", self.quick);
        for f in &self.test_functions {
            let _ = writeln!(s, "test-function = {f}");
        }
        let _ = writeln!(s, "sweep-param = {}", self.sweep.param.as_str());
        let _ = writeln!(s, "sweep-from = {}", self.sweep.from);
        let _ = writeln!(s, "sweep-to = {}", self.sweep.to);
        let _ = writeln!(s, "sweep-steps = {}", self.sweep.steps);
        s
    }

    /// Range checks shared by every subcommand.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("k", self.k), ("t", self.t)] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return bad(format!("{name} must be finite, got {v}"));
                }
            }
        }
        if let Some(t) = self.t {
            if t <= 0.0 {
                return bad(format!("t must be positive, got {t}"));
            }
        }
        if !(2..=MAX_GRID_POINTS).contains(&self.grid_points) {
            return bad(format!("grid-points must lie in 2..={MAX_GRID_POINTS}, got {}", self.grid_points));
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.n_max == 0 {
            return bad("n-max must be at least 1".into());
        }
        if !self.y.iter().all(|v| v.is_finite()) {
            return bad("y1 and y2 must be finite".into());
        }
        if self.samples < crate::gausskernels::MC_MIN_SAMPLES {
            return bad(format!("samples must be at least {}", crate::gausskernels::MC_MIN_SAMPLES));
        }
        let s = &self.sweep;
        if !(s.from.is_finite() && s.to.is_finite()) || !(1..=MAX_SWEEP_STEPS).contains(&s.steps) {
            return bad(format!("sweep range must be finite with 1..={MAX_SWEEP_STEPS} steps"));
        }
        for f in &self.test_functions {
            f.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn require_model(&self) -> Result<MagneticModel> {
        let k = self.k.ok_or_else(|| Error::Config("--k is required (see --help)".into()))?;
        let t = self.t.ok_or_else(|| Error::Config("--t is required (see --help)".into()))?;
        MagneticModel::new(k, t)
    }
}

#[derive(Parser, Debug)]
#[command(name = "hida-lab", version, about = "White-noise Feynman integrand of a charged particle in a constant magnetic field")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Analytic vs discrete eigenvalues of L(Id + K)⁻¹.
    Spectrum,
    /// Closed, product and discrete Fredholm determinants.
    Determinant,
    /// Closed preimages, the numeric solve and the Gram matrix.
    Preimage,
    /// T-transform at a test function by the numeric and the closed route.
    Ttransform,
    /// Composed propagator next to the printed formula.
    Propagator,
    /// Schrödinger residual for every convention.
    Residual,
    /// Runs the full verification suite.
    Verify,
    /// Propagator over a parameter range.
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Determinant => "determinant",
            Command::Preimage => "preimage",
            Command::Ttransform => "ttransform",
            Command::Propagator => "propagator",
            Command::Residual => "residual",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// Coupling constant.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub k: Option<f64>,
    /// Duration.
    #[arg(long, global = true)]
    pub t: Option<f64>,
    /// Grid nodes on [0, t).
    #[arg(long, global = true)]
    pub grid_points: Option<usize>,
    /// Analytic eigenvalues to match.
    #[arg(long, global = true)]
    pub count: Option<usize>,
    /// Truncation of the determinant product.
    #[arg(long, global = true)]
    pub n_max: Option<u64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub y1: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub y2: Option<f64>,
    /// Monte Carlo samples.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub output: Option<OutputFormat>,
    #[arg(long, global = true)]
    pub out_file: Option<PathBuf>,
    /// composed, printed or lemma-printed.
    #[arg(long, global = true)]
    pub convention: Option<Convention>,
    /// Smaller grids, same checks.
    #[arg(long, global = true)]
    pub quick: bool,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Test-function spec, e.g. `gaussian_bump:amplitude=1,center=0.5,width=0.05,component=1`; repeatable.
    #[arg(long = "test-function", global = true)]
    pub test_functions: Vec<TestFunctionSpec>,
    #[arg(long, global = true, value_enum)]
    pub sweep_param: Option<SweepParam>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub sweep_from: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub sweep_to: Option<f64>,
    #[arg(long, global = true)]
    pub sweep_steps: Option<usize>,
}

impl Flags {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            c.apply_text(&text)?;
        }
        macro_rules! take {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        take!(
            grid_points => c.grid_points,
            count => c.count,
            n_max => c.n_max,
            y1 => c.y[0],
            y2 => c.y[1],
            samples => c.samples,
            seed => c.seed,
            output => c.output,
            convention => c.convention,
            sweep_param => c.sweep.param,
            sweep_from => c.sweep.from,
            sweep_to => c.sweep.to,
            sweep_steps => c.sweep.steps,
        );
        if self.k.is_some() {
            c.k = self.k;
        }
        if self.t.is_some() {
            c.t = self.t;
        }
        if self.out_file.is_some() {
            c.out_file = self.out_file.clone();
        }
        c.quick |= self.quick;
        if !self.test_functions.is_empty() {
            c.test_functions = self.test_functions.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Rendered report and verdict of one run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub text: String,
    /// `false` when a verification check failed (exit code 1).
    pub passed: bool,
}

struct Produced {
    results: Value,
    diagnostics: Value,
    csv: Option<String>,
    passed: bool,
}

impl Produced {
    fn json(results: Value, diagnostics: Value) -> Self {
        Self {
            results,
            diagnostics,
            csv: None,
            passed: true,
        }
    }
}

/// Runs one subcommand on a resolved config.
pub fn run(command: Command, config: &RunConfig) -> Result<Outcome> {
    config.validate()?;
    let produced = match command {
        Command::Spectrum => cmd_spectrum(config)?,
        Command::Determinant => cmd_determinant(config)?,
        Command::Preimage => cmd_preimage(config)?,
        Command::Ttransform => cmd_ttransform(config)?,
        Command::Propagator => cmd_propagator(config)?,
        Command::Residual => cmd_residual(config)?,
        Command::Verify => cmd_verify(config),
        Command::Sweep => cmd_sweep(config)?,
    };
    let text = match config.output {
        OutputFormat::Csv => produced
            .csv
            .ok_or_else(|| Error::Config(format!("csv output is available for spectrum and sweep, not {}", command.name())))?,
        OutputFormat::Json => {
            let env = envelope(command.name(), to_value(config), produced.results, produced.diagnostics);
            let mut s = serde_json::to_string_pretty(&env).map_err(|e| Error::NumericFailure(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    Ok(Outcome {
        text,
        passed: produced.passed,
    })
}

fn spectrum_csv(rep: &SpectralReport) -> String {
    let mut s = String::from("index,analytic,positive_1,positive_2,negative_1,negative_2,rel_error,pair_gap\n");
    for m in &rep.matches {
        let cell = |v: &[f64], i: usize| v.get(i).map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            m.index,
            m.analytic,
            cell(&m.positive, 0),
            cell(&m.positive, 1),
            cell(&m.negative, 0),
            cell(&m.negative, 1),
            m.rel_error,
            m.pair_gap
        );
    }
    s
}

fn cmd_spectrum(c: &RunConfig) -> Result<Produced> {
    let m = c.require_model()?;
    let g = m.grid(c.grid_points)?;
    let rep = discrete_spectrum_with(&m, &g, c.count, MATCH_TOLERANCE)?;
    let csv = spectrum_csv(&rep);
    Ok(Produced {
        diagnostics: json!({ "all_matched": rep.all_matched, "tolerance": rep.tolerance }),
        results: to_value(&rep),
        csv: Some(csv),
        passed: true,
    })
}

fn cmd_determinant(c: &RunConfig) -> Result<Produced> {
    let m = c.require_model()?;
    let rep = determinant_report(&m, &m.grid(c.grid_points)?, c.n_max)?;
    Ok(Produced::json(to_value(&rep), json!({ "caustic": caustic_check(&m) })))
}

fn cmd_preimage(c: &RunConfig) -> Result<Produced> {
    let m = c.require_model()?;
    let g = m.grid(c.grid_points)?;
    let residual = verify_preimage(&m, &g)?;
    let (e1, e2) = indicator_etas(&g);
    let solved = solve_N(&m, &g, &e1)?;
    let gap = solved.x.sub(&closed_preimage_f(&m, &g)?)?.sup_norm();
    let gram = gram_matrix(&m, &g, &[e1, e2])?;
    Ok(Produced::json(
        json!({
            "residual": residual,
            "solve_vs_closed_sup": gap,
            "gram": gram,
            "analytic_gram_diagonal": complex_value(analytic_gram_diagonal(&m)?),
        }),
        json!({ "solve": solved, "caustic": caustic_check(&m) }),
    ))
}

fn test_function(c: &RunConfig, g: &crate::Grid) -> Result<(Vec<TestFunctionSpec>, crate::GridFunctionPair)> {
    let specs = if c.test_functions.is_empty() {
        random_specs(c.seed, 1, g.t())?.remove(0).to_vec()
    } else {
        c.test_functions.clone()
    };
    let f = generate_sum(&specs, g)?;
    Ok((specs, f))
}

fn cmd_ttransform(c: &RunConfig) -> Result<Produced> {
    let m = c.require_model()?;
    let g = m.grid(c.grid_points)?;
    let (specs, f) = test_function(c, &g)?;
    // the numeric route has no printed variant; it stays composed
    let lemma_convention = if c.convention == Convention::Printed { Convention::Composed } else { c.convention };
    let lemma = MasterProblem::magnetic(&m, &g)?.evaluate(None, &c.y, &f, lemma_convention)?;
    let closed = magnetic_T(&m, c.y, &f, c.convention)?;
    let gap = (closed.value - lemma.value).norm() / lemma.value.norm();
    Ok(Produced::json(
        json!({
            "test_functions": specs.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            "lemma": lemma,
            "closed": closed,
            "relative_gap": gap,
        }),
        json!({ "caustic": caustic_check(&m) }),
    ))
}

fn cmd_propagator(c: &RunConfig) -> Result<Produced> {
    let m = c.require_model()?;
    let rep = propagator(&m, c.y, c.grid_points)?;
    let note = if rep.composed_vs_printed > 1e-6 {
        "the printed formula disagrees with the composed value; the composed value is authoritative"
    } else {
        "the printed formula agrees with the composed value"
    };
    Ok(Produced::json(
        json!({ "selected": rep.value(c.convention), "report": rep }),
        json!({ "note": note }),
    ))
}

fn residual_inputs(c: &RunConfig) -> Result<(f64, SpatialBox, TimeSpan, StepSchedule)> {
    let m = c.require_model()?;
    let steps = StepSchedule::default();
    Ok((
        m.k(),
        SpatialBox {
            center: c.y,
            half_width: 0.6,
            points: if c.quick { 3 } else { 5 },
        },
        TimeSpan {
            start: 0.5 * m.t(),
            end: m.t(),
            points: 3,
        },
        steps,
    ))
}

fn cmd_residual(c: &RunConfig) -> Result<Produced> {
    let (k, y_box, span, steps) = residual_inputs(c)?;
    let adj = adjudicate_conventions(k, &y_box, &span, &steps)?;
    Ok(Produced::json(
        json!({ "box": y_box, "span": span, "steps": steps, "adjudication": adj }),
        json!({ "passing_convention": adj.unique.map(|x| x.as_str()) }),
    ))
}

fn cmd_verify(c: &RunConfig) -> Produced {
    let rep = verify::run(SuiteInputs {
        seed: c.seed,
        samples: c.samples,
        quick: c.quick,
    });
    let summary: Vec<Value> = rep
        .checks
        .iter()
        .map(|ch| json!({ "id": ch.id, "name": ch.name, "passed": ch.passed }))
        .collect();
    Produced {
        passed: rep.all_passed,
        diagnostics: json!({ "summary": summary, "failed": rep.failed }),
        results: to_value(&rep),
        csv: None,
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    index: usize,
    value: f64,
    k: f64,
    t: f64,
    kt: f64,
    class: Option<CausticClass>,
    #[serde(with = "opt_complex")]
    composed: Option<crate::C64>,
    #[serde(with = "opt_complex")]
    composed_closed: Option<crate::C64>,
    #[serde(with = "opt_complex")]
    printed: Option<crate::C64>,
    #[serde(with = "opt_complex")]
    free_reference: Option<crate::C64>,
    error: Option<String>,
}

mod opt_complex {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(z: &Option<crate::C64>, s: S) -> Result<S::Ok, S::Error> {
        match z {
            Some(z) => s.serialize_some(&crate::report::complex_value(*z)),
            None => s.serialize_none(),
        }
    }
}

fn sweep_point(c: &RunConfig, index: usize, value: f64) -> SweepRow {
    let (mut k, mut t, mut y, mut n) = (c.k.unwrap_or(f64::NAN), c.t.unwrap_or(f64::NAN), c.y, c.grid_points);
    match c.sweep.param {
        SweepParam::T => t = value,
        SweepParam::K => k = value,
        SweepParam::Y1 => y[0] = value,
        SweepParam::Y2 => y[1] = value,
        SweepParam::GridPoints => n = value.round() as usize,
    }
    let mut row = SweepRow {
        index,
        value,
        k,
        t,
        kt: k * t,
        class: None,
        composed: None,
        composed_closed: None,
        printed: None,
        free_reference: None,
        error: None,
    };
    let result = (|| -> Result<()> {
        let m = MagneticModel::new(k, t)?;
        row.class = Some(caustic_check(&m).class);
        row.free_reference = Some(free_limit_reference(t, y)?);
        if row.class != Some(CausticClass::Regular) {
            return Ok(());
        }
        row.composed_closed = Some(closed_propagator(&m, y, Convention::Composed)?.value);
        row.printed = Some(printed_propagator(&m, y)?);
        row.composed = Some(propagator(&m, y, n)?.composed.value);
        Ok(())
    })();
    if let Err(e) = result {
        row.error = Some(e.to_string());
    }
    row
}

fn cmd_sweep(c: &RunConfig) -> Result<Produced> {
    let need = |name: &str, v: Option<f64>, swept: bool| {
        if v.is_none() && !swept {
            Err(Error::Config(format!("--{name} is required (see --help)")))
        } else {
            Ok(())
        }
    };
    need("k", c.k, c.sweep.param == SweepParam::K)?;
    need("t", c.t, c.sweep.param == SweepParam::T)?;
    if c.sweep.param == SweepParam::GridPoints {
        let bad = c.sweep.values().into_iter().any(|v| !(2.0..=MAX_GRID_POINTS as f64).contains(&v.round()));
        if bad {
            return Err(Error::Config(format!("swept grid sizes must lie in 2..={MAX_GRID_POINTS}")));
        }
    }
    let values = c.sweep.values();
    let rows = map_indexed(Strategy::default(), values.len(), |i| sweep_point(c, i, values[i]));
    let opt = |z: &Option<crate::C64>| z.map(|z| format!("{},{}", z.re, z.im)).unwrap_or_else(|| ",".into());
    let mut csv = String::from(
        "index,value,k,t,kt,class,composed_re,composed_im,closed_re,closed_im,printed_re,printed_im,free_re,free_im\n",
    );
    for r in &rows {
        let class = r.class.map(|c| to_value(&c).as_str().unwrap_or_default().to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.value,
            r.k,
            r.t,
            r.kt,
            class,
            opt(&r.composed),
            opt(&r.composed_closed),
            opt(&r.printed),
            opt(&r.free_reference)
        );
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(Produced {
        results: json!({ "param": c.sweep.param, "rows": rows }),
        diagnostics: json!({ "points": values.len(), "errors": failures }),
        csv: Some(csv),
        passed: true,
    })
}

/// Parses arguments, runs, writes the report and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    crate::exec::configure_threads_from_env();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = cli.flags.resolve().and_then(|config| {
        let out = run(cli.command, &config)?;
        match &config.out_file {
            Some(p) => std::fs::write(p, &out.text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => print!("{}", out.text),
        }
        Ok(out.passed)
    });
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Caustic { class, .. } = &e {
                eprintln!("caustic class: {}", to_value(class).as_str().unwrap_or_default());
            }
            if e.exit_code() == 2 {
                eprintln!("run `hida-lab --help` for usage");
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::strategy::Strategy;

    fn cfg(k: f64, t: f64) -> RunConfig {
        RunConfig {
            k: Some(k),
            t: Some(t),
            grid_points: 60,
            count: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn text_round_trip_of_defaults_and_precedence() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "k = 2\nt = 1 # comment\ngrid-points = 40\n\n").unwrap();
        let flags = Flags {
            config: Some(path),
            k: Some(0.5),
            ..Flags::default()
        };
        let r = flags.resolve().unwrap();
        assert_eq!((r.k, r.t, r.grid_points), (Some(0.5), Some(1.0), 40));
    }

    #[test]
    fn config_errors() {
        assert!(RunConfig::from_text("bogus = 1").is_err());
        assert!(RunConfig::from_text("k 1").is_err());
        assert!(RunConfig::from_text("grid-points = -3").is_err());
        let c = RunConfig {
            grid_points: 1,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert_eq!(RunConfig::default().require_model().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn csv_only_where_tabular() {
        let c = RunConfig {
            output: OutputFormat::Csv,
            ..cfg(1.0, 1.0)
        };
        assert!(run(Command::Spectrum, &c).unwrap().text.starts_with("index,analytic"));
        assert!(run(Command::Determinant, &c).is_err());
    }

    #[test]
    fn sweep_records_caustics_as_rows() {
        let mut c = cfg(1.0, 1.0);
        c.sweep = SweepConfig {
            param: SweepParam::T,
            from: std::f64::consts::FRAC_PI_2,
            to: 1.0 + std::f64::consts::FRAC_PI_2,
            steps: 2,
        };
        let out: Value = serde_json::from_str(&run(Command::Sweep, &c).unwrap().text).unwrap();
        let rows = out["results"]["rows"].as_array().unwrap();
        assert_eq!(rows[0]["class"], "half_integer_caustic");
        assert!(rows[0]["composed"].is_null());
        assert_eq!(rows[1]["class"], "regular");
    }

    fn spec_strategy() -> impl Strategy<Value = TestFunctionSpec> {
        (0.1f64..2.0, 0.1f64..0.9, 0.01f64..0.2, 1u8..=2).prop_map(|(a, c, w, comp)| TestFunctionSpec::gaussian_bump(a, c, w, comp))
    }

    proptest! {
        #[test]
        fn config_text_round_trips(
            k in proptest::option::of(-10.0f64..10.0),
            t in proptest::option::of(0.01f64..10.0),
            grid_points in 2usize..=MAX_GRID_POINTS,
            count in 1usize..50,
            n_max in 1u64..1_000_000,
            y1 in -5.0f64..5.0,
            y2 in -5.0f64..5.0,
            samples in 100usize..1_000_000,
            seed in any::<u64>(),
            csv in any::<bool>(),
            conv in 0usize..3,
            quick in any::<bool>(),
            specs in proptest::collection::vec(spec_strategy(), 0..3),
            from in -3.0f64..3.0,
            to in -3.0f64..3.0,
            steps in 1usize..100,
        ) {
            let c = RunConfig {
                k, t, grid_points, count, n_max, y: [y1, y2], samples, seed,
                output: if csv { OutputFormat::Csv } else { OutputFormat::Json },
                out_file: None,
                convention: Convention::ALL[conv],
                quick,
                test_functions: specs,
                sweep: SweepConfig { param: SweepParam::K, from, to, steps },
            };
            prop_assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c.clone());
            let json = serde_json::to_string(&c).unwrap();
            prop_assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
        }
    }
}
