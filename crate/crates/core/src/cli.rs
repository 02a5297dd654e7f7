//! Command-line front end: configuration, dispatch and result documents.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::contour::{ContourError, QuadratureConfig};
use crate::eigensystem::{verify_generator, EigenError, PreparedLevel, SolverOptions};
use crate::kernel::psi_principal;
use crate::model::{reference_model, validate_model, ModelError, ModelParams, OuModel};
use crate::ruin::{
    asymptotic_k_from, recurrent_split, undershoot_limit, FirstPassage, LevelLimit, Query,
    RuinError, RuinResult,
};
use crate::simulate::{barrier_tail_bound, default_barrier, estimate_laplace_grid, PathConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_UNSUPPORTED: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Table,
    #[default]
    Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepVar {
    X,
    Level,
    Zeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepTarget {
    Ruin,
    Laplace,
    Split,
    AsymptLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default = "default_x")]
    pub x: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub zeta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta_grid: Option<Vec<f64>>,
}

fn default_x() -> f64 {
    1.0
}

fn default_level() -> f64 {
    -1.0
}

impl Default for QuerySpec {
    fn default() -> Self {
        QuerySpec {
            x: default_x(),
            level: default_level(),
            zeta: 0.0,
            zeta_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Relative tolerance of the contour quadrature.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_condition_limit")]
    pub condition_limit: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_barrier: Option<f64>,
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

fn default_tol() -> f64 {
    QuadratureConfig::default().rel_tol
}

fn default_condition_limit() -> f64 {
    SolverOptions::default().condition_limit
}

fn default_seed() -> u64 {
    1
}

fn default_paths() -> usize {
    100_000
}

impl Default for ComputeSpec {
    fn default() -> Self {
        ComputeSpec {
            command: None,
            tol: default_tol(),
            condition_limit: default_condition_limit(),
            seed: default_seed(),
            paths: default_paths(),
            horizon: None,
            upper_barrier: None,
            format: Format::Document,
            out: None,
        }
    }
}

/// Everything a run needs; echoed into every result document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelParams,
    #[serde(default)]
    pub query: QuerySpec,
    #[serde(default)]
    pub compute: ComputeSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            model: reference_model().params(),
            query: QuerySpec::default(),
            compute: ComputeSpec::default(),
        }
    }
}

impl RunSpec {
    /// Parse a TOML configuration, or the `config` member of a JSON result document.
    pub fn parse(text: &str) -> Result<RunSpec, CliError> {
        let spec: RunSpec = if text.trim_start().starts_with('{') {
            let doc: Value = serde_json::from_str(text)
                .map_err(|e| CliError::config(format!("document: {e}")))?;
            let cfg = doc.get("config").cloned().unwrap_or(doc);
            serde_json::from_value(cfg)
                .map_err(|e| CliError::config(format!("document config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?
        };
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<RunSpec, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validated_model(&self) -> Result<OuModel, CliError> {
        Ok(validate_model(&self.model)?)
    }

    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            quad: QuadratureConfig::with_rel_tol(self.compute.tol),
            condition_limit: self.compute.condition_limit,
            ..SolverOptions::default()
        }
    }

    fn zetas(&self) -> Vec<f64> {
        self.query
            .zeta_grid
            .clone()
            .unwrap_or_else(|| vec![self.query.zeta])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::config(format!("model: {e}"))
    }
}

impl From<EigenError> for CliError {
    fn from(e: EigenError) -> Self {
        match e {
            EigenError::UnsupportedScenario(m) => CliError {
                code: EXIT_UNSUPPORTED,
                message: format!("unsupported scenario: {m}"),
            },
            e => CliError::numeric(e.to_string()),
        }
    }
}

impl From<ContourError> for CliError {
    fn from(e: ContourError) -> Self {
        CliError::numeric(e.to_string())
    }
}

impl From<RuinError> for CliError {
    fn from(e: RuinError) -> Self {
        match e {
            RuinError::BadQuery(m) => CliError::config(format!("query: {m}")),
            RuinError::UnsupportedScenario(m) => CliError {
                code: EXIT_UNSUPPORTED,
                message: format!("unsupported scenario: {m}"),
            },
            RuinError::Eigen(e) => e.into(),
            e => CliError::numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ouruin",
    version,
    about = "First-passage functionals of jump-driven Ornstein-Uhlenbeck processes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration, or a previous JSON result document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub x: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub level: Option<f64>,
    #[arg(long, global = true)]
    pub zeta: Option<f64>,
    /// Relative quadrature tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Validate the model and list the branch points of the kernel.
    Validate,
    /// Evaluate the kernel at a complex point.
    Kernel {
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        re: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        im: f64,
    },
    /// Probability of ever reaching the level.
    Ruin,
    /// Undershoot transform on the jump event, for each Laplace argument.
    Laplace,
    /// Continuous and jump crossing probabilities under negative drift.
    Split,
    /// Tail constant as the start tends to infinity.
    AsymptX {
        /// Offset of the scaled reference wedge.
        #[arg(long, default_value_t = 1.0)]
        a: f64,
    },
    /// Limit of the ruin probability as the level tends to minus infinity.
    AsymptLevel,
    /// Limit of the undershoot transform under negative drift.
    UndershootLimit,
    /// Monte Carlo estimates.
    Simulate,
    /// Check that the eigenfunctions are annihilated by the generator.
    VerifyGenerator,
    /// Evaluate a command over a grid in one variable.
    Sweep {
        #[arg(long, value_enum)]
        var: SweepVar,
        #[arg(long, allow_negative_numbers = true)]
        from: f64,
        #[arg(long, allow_negative_numbers = true)]
        to: f64,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(value_enum)]
        target: SweepTarget,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Kernel { .. } => "kernel",
            Command::Ruin => "ruin",
            Command::Laplace => "laplace",
            Command::Split => "split",
            Command::AsymptX { .. } => "asympt-x",
            Command::AsymptLevel => "asympt-level",
            Command::UndershootLimit => "undershoot-limit",
            Command::Simulate => "simulate",
            Command::VerifyGenerator => "verify-generator",
            Command::Sweep { .. } => "sweep",
        }
    }
}

/// Tabular result with free-form details.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Rows breaking an output invariant; reported, never clamped.
    pub flags: Vec<String>,
    pub details: Value,
}

impl Report {
    fn new(columns: &[&str]) -> Report {
        Report {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            flags: Vec::new(),
            details: Value::Null,
        }
    }

    fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn check(&mut self, r: &RuinResult) {
        if !r.within_invariants(1e-8) {
            self.flags.push(format!(
                "row {}: {:?} value {} imaginary residual {:.3e}",
                self.rows.len(),
                r.kind,
                r.value,
                r.imag_residual
            ));
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| cell(*v)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_document(&self, command: &Command, spec: &RunSpec) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Array(r.iter().map(|v| num(*v)).collect()))
            .collect();
        json!({
            "command": command.name(),
            "arguments": command,
            "config": spec,
            "columns": self.columns,
            "rows": rows,
            "flags": self.flags,
            "details": self.details,
        })
    }
}

/// Shortest round-trip decimal, in exponent form outside `[1e-4, 1e15)`.
fn cell(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Non-finite numbers become strings so documents stay valid JSON.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

fn cjson(v: Complex64) -> Value {
    json!([num(v.re), num(v.im)])
}

fn ruin_row(x: f64, level: f64, r: &RuinResult) -> Vec<f64> {
    vec![
        x,
        level,
        r.value,
        r.imag_residual,
        r.diagnostics.condition,
        r.diagnostics.quadrature_error,
    ]
}

fn cmd_validate(spec: &RunSpec) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let mut rep = Report::new(&["location", "exponent", "is_zero"]);
    let pts = m.classify_points();
    for p in &pts {
        rep.push(vec![
            p.location,
            p.exponent,
            f64::from(u8::from(p.kind == crate::model::PointKind::Zero)),
        ]);
    }
    rep.details = json!({
        "points": pts,
        "downward_convex": m.down.is_convex(),
        "upward_convex": m.up.is_convex(),
    });
    Ok(rep)
}

fn cmd_kernel(spec: &RunSpec, re: f64, im: f64) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let z = Complex64::new(re, im);
    let v = psi_principal(&m, z).map_err(|e| CliError::numeric(e.to_string()))?;
    let mut rep = Report::new(&["re", "im", "psi_re", "psi_im"]);
    rep.push(vec![re, im, v.re, v.im]);
    Ok(rep)
}

fn ruin_columns() -> [&'static str; 6] {
    [
        "x",
        "level",
        "ruin",
        "imag_residual",
        "condition",
        "quadrature_error",
    ]
}

fn cmd_ruin(spec: &RunSpec, opts: &SolverOptions) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    Query::new(q.x, q.level, 0.0)?;
    let r = if m.kappa < 0.0 {
        crate::ruin::ruin_probability(&m, q.x, q.level, opts)?
    } else {
        FirstPassage::new(&m, q.level, 0.0, opts)?.ruin(q.x)?
    };
    let mut rep = Report::new(&ruin_columns());
    rep.check(&r);
    rep.push(ruin_row(q.x, q.level, &r));
    Ok(rep)
}

fn laplace_columns() -> [&'static str; 8] {
    [
        "x",
        "level",
        "zeta",
        "jump",
        "continuous",
        "imag_residual",
        "condition",
        "quadrature_error",
    ]
}

fn laplace_rows(fp: &FirstPassage, xs: &[f64], rep: &mut Report) -> Result<(), CliError> {
    for &x in xs {
        let out = fp.laplace(x)?;
        rep.check(&out.jump);
        if let Some(c) = &out.continuous {
            rep.check(c);
        }
        let cont = out.continuous.map_or(0.0, |c| c.value);
        let imag = out
            .jump
            .imag_residual
            .max(out.continuous.map_or(0.0, |c| c.imag_residual));
        rep.push(vec![
            x,
            fp.level(),
            fp.zeta,
            out.jump.value,
            cont,
            imag,
            out.jump.diagnostics.condition,
            out.jump.diagnostics.quadrature_error,
        ]);
    }
    Ok(())
}

fn cmd_laplace(spec: &RunSpec, opts: &SolverOptions) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    let mut rep = Report::new(&laplace_columns());
    let mut prepared: Option<PreparedLevel> = None;
    for z in spec.zetas() {
        Query::new(q.x, q.level, z)?;
        let fp = match &prepared {
            Some(p) => FirstPassage::from_prepared(p.clone(), z)?,
            None => {
                let fp = FirstPassage::new(&m, q.level, z, opts)?;
                prepared = Some(fp.prepared.clone());
                fp
            }
        };
        laplace_rows(&fp, &[q.x], &mut rep)?;
    }
    Ok(rep)
}

fn cmd_split(spec: &RunSpec, opts: &SolverOptions) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    let (cont, jump) = recurrent_split(&m, q.x, q.level, opts)?;
    let mut rep = Report::new(&[
        "x",
        "level",
        "continuous",
        "jump",
        "imag_residual",
        "condition",
    ]);
    rep.check(&cont);
    rep.check(&jump);
    rep.push(vec![
        q.x,
        q.level,
        cont.value,
        jump.value,
        cont.imag_residual,
        cont.diagnostics.condition,
    ]);
    Ok(rep)
}

fn cmd_asympt_x(spec: &RunSpec, opts: &SolverOptions, a: f64) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    let fp = FirstPassage::new(&m, q.level, 0.0, opts)?;
    let k = asymptotic_k_from(&fp, a)?;
    let n = k.normalizer.expect("tail constant has a normaliser");
    let p = fp.ruin(q.x)?;
    let ratio = p.value / n.eval(q.x);
    // The normaliser with the opposite sign of the kernel exponent, for comparison.
    let literal = p.value / ((-m.mus()[0] * q.x).exp() * q.x.powf(m.mu_exponent(0) - 1.0));
    let mut rep = Report::new(&[
        "level",
        "x",
        "k_re",
        "k_im",
        "ruin",
        "ratio",
        "relative_gap",
        "literal_ratio",
    ]);
    rep.check(&p);
    rep.push(vec![
        q.level,
        q.x,
        k.constant.re,
        k.constant.im,
        p.value,
        ratio,
        (ratio - k.constant.re).abs() / k.constant.re.abs(),
        literal,
    ]);
    rep.details = json!({
        "normaliser": {"rate": n.rate, "power": n.power},
        "ingredients": k.ingredients.iter().map(|(s, v)| json!({"name": s, "value": cjson(*v)})).collect::<Vec<_>>(),
    });
    Ok(rep)
}

fn limit_rows(lim: &LevelLimit, xs: &[f64], rep: &mut Report) -> Result<(), CliError> {
    for &x in xs {
        let v = lim.eval(x)?;
        if v.im.abs() > 1e-8 || !(-1e-8..=1.0 + 1e-8).contains(&v.re) {
            rep.flags
                .push(format!("row {}: limit {} {}i", rep.rows.len(), v.re, v.im));
        }
        rep.push(vec![x, v.re, v.im.abs()]);
    }
    Ok(())
}

fn level_limit_details(lim: &LevelLimit) -> Value {
    json!({
        "coefficients": lim.coefficients.iter().map(|c| cjson(*c)).collect::<Vec<_>>(),
        "ingredients": lim.ingredients.iter().map(|(s, v)| json!({"name": s, "value": cjson(*v)})).collect::<Vec<_>>(),
    })
}

fn cmd_asympt_level(spec: &RunSpec, opts: &SolverOptions) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let lim = LevelLimit::new(&m, opts)?;
    let mut rep = Report::new(&["x", "limit", "imag_residual"]);
    limit_rows(&lim, &[spec.query.x], &mut rep)?;
    rep.details = level_limit_details(&lim);
    Ok(rep)
}

fn cmd_undershoot_limit(spec: &RunSpec) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let mut rep = Report::new(&["zeta", "limit"]);
    for z in spec.zetas() {
        let a = undershoot_limit(&m, z)?;
        rep.push(vec![z, a.constant.re]);
    }
    Ok(rep)
}

fn cmd_simulate(spec: &RunSpec) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    let zetas = spec.zetas();
    for &z in &zetas {
        Query::new(q.x, q.level, z)?;
    }
    let mut cfg = PathConfig::for_model(&m, q.x, spec.compute.seed, spec.compute.paths);
    if let Some(h) = spec.compute.horizon {
        cfg.horizon = h;
    }
    if m.kappa > 0.0 {
        let b = spec
            .compute
            .upper_barrier
            .unwrap_or_else(|| default_barrier(&m, q.x));
        if b <= q.x.max(0.0) {
            return Err(CliError::config(format!(
                "upper barrier {b} must exceed the start"
            )));
        }
        cfg.upper_barrier = Some(b);
        cfg.tail_bound = barrier_tail_bound(&m, q.level, b);
    }
    let est = estimate_laplace_grid(&m, q.x, q.level, &zetas, &cfg);
    let mut rep = Report::new(&[
        "x",
        "level",
        "zeta",
        "jump",
        "jump_se",
        "continuous",
        "continuous_se",
        "ruin",
        "ruin_se",
        "truncation",
    ]);
    for (z, e) in zetas.iter().zip(&est) {
        rep.push(vec![
            q.x,
            q.level,
            *z,
            e.jump.mean,
            e.jump.stderr,
            e.continuous.mean,
            e.continuous.stderr,
            e.ruin.mean,
            e.ruin.stderr,
            e.ruin.truncation_note.unwrap_or(0.0),
        ]);
    }
    rep.details = json!({ "paths": cfg.n_paths, "seed": cfg.seed, "upper_barrier": cfg.upper_barrier, "horizon": cfg.horizon });
    Ok(rep)
}

/// Grid of `n` points strictly inside `(level, level + 20)`.
pub fn generator_grid(level: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| level + 20.0 * (i as f64 + 0.5) / n as f64)
        .collect()
}

fn cmd_verify(spec: &RunSpec, opts: &SolverOptions) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    let prepared = PreparedLevel::new(&m, q.level, opts)?;
    let grid = generator_grid(q.level, 50);
    let mut rep = Report::new(&["function", "y", "relative"]);
    let mut worst = 0.0f64;
    let mut passed = true;
    for (i, f) in prepared.eigenfunctions(q.zeta)?.iter().enumerate() {
        let r = verify_generator(f, &grid, 1e-6)?;
        worst = worst.max(r.max_relative);
        passed &= r.passed;
        for (y, img) in &r.points {
            rep.push(vec![(i + 1) as f64, *y, img.relative()]);
        }
    }
    rep.details = json!({ "max_relative": worst, "tolerance": 1e-6, "passed": passed });
    if !passed {
        rep.flags
            .push(format!("generator residual {worst:.3e} above 1e-6"));
    }
    Ok(rep)
}

/// `n` evenly spaced points from `from` to `to` inclusive.
pub fn linspace(from: f64, to: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![from],
        _ => (0..n)
            .map(|i| from + (to - from) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn cmd_sweep(
    spec: &RunSpec,
    opts: &SolverOptions,
    var: SweepVar,
    grid: &[f64],
    target: SweepTarget,
) -> Result<Report, CliError> {
    let m = spec.validated_model()?;
    let q = &spec.query;
    match target {
        SweepTarget::AsymptLevel => {
            if var != SweepVar::X {
                return Err(CliError::config("the level limit can only be swept in x"));
            }
            let lim = LevelLimit::new(&m, opts)?;
            let mut rep = Report::new(&["x", "limit", "imag_residual"]);
            limit_rows(&lim, grid, &mut rep)?;
            rep.details = level_limit_details(&lim);
            Ok(rep)
        }
        SweepTarget::Ruin => {
            let mut rep = Report::new(&ruin_columns());
            match var {
                SweepVar::X => {
                    if m.kappa < 0.0 {
                        for &x in grid {
                            let r = crate::ruin::ruin_probability(&m, x, q.level, opts)?;
                            rep.push(ruin_row(x, q.level, &r));
                        }
                    } else {
                        let fp = FirstPassage::new(&m, q.level, 0.0, opts)?;
                        for &x in grid {
                            let r = fp.ruin(x)?;
                            rep.check(&r);
                            rep.push(ruin_row(x, q.level, &r));
                        }
                    }
                }
                SweepVar::Level => {
                    for &l in grid {
                        let r = crate::ruin::ruin_probability(&m, q.x, l, opts)?;
                        rep.check(&r);
                        rep.push(ruin_row(q.x, l, &r));
                    }
                }
                SweepVar::Zeta => {
                    return Err(CliError::config("ruin probabilities do not depend on zeta"))
                }
            }
            Ok(rep)
        }
        SweepTarget::Laplace => {
            let mut rep = Report::new(&laplace_columns());
            match var {
                SweepVar::X => {
                    let fp = FirstPassage::new(&m, q.level, q.zeta, opts)?;
                    laplace_rows(&fp, grid, &mut rep)?;
                }
                SweepVar::Level => {
                    for &l in grid {
                        let fp = FirstPassage::new(&m, l, q.zeta, opts)?;
                        laplace_rows(&fp, &[q.x], &mut rep)?;
                    }
                }
                SweepVar::Zeta => {
                    Query::new(q.x, q.level, 0.0)?;
                    let prepared = PreparedLevel::new(&m, q.level, opts)?;
                    for &z in grid {
                        Query::new(q.x, q.level, z)?;
                        if m.kappa < 0.0 && q.level > 0.0 && z > 0.0 {
                            return Err(RuinError::UnsupportedScenario(
                                "negative drift with a positive level needs zeta = 0".into(),
                            )
                            .into());
                        }
                        let fp = FirstPassage::from_prepared(prepared.clone(), z)?;
                        laplace_rows(&fp, &[q.x], &mut rep)?;
                    }
                }
            }
            Ok(rep)
        }
        SweepTarget::Split => {
            let mut rep = Report::new(&[
                "x",
                "level",
                "continuous",
                "jump",
                "imag_residual",
                "condition",
            ]);
            for &v in grid {
                let (x, l) = match var {
                    SweepVar::X => (v, q.level),
                    SweepVar::Level => (q.x, v),
                    SweepVar::Zeta => {
                        return Err(CliError::config("the split does not depend on zeta"))
                    }
                };
                let (c, j) = recurrent_split(&m, x, l, opts)?;
                rep.check(&c);
                rep.check(&j);
                rep.push(vec![
                    x,
                    l,
                    c.value,
                    j.value,
                    c.imag_residual,
                    c.diagnostics.condition,
                ]);
            }
            Ok(rep)
        }
    }
}

/// Parse arguments, run the command and write its output. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Merge command-line overrides into the configuration.
pub fn resolve_spec(cli: &Cli) -> Result<RunSpec, CliError> {
    let mut spec = match &cli.config {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default(),
    };
    if let Some(x) = cli.x {
        spec.query.x = x;
    }
    if let Some(l) = cli.level {
        spec.query.level = l;
    }
    if let Some(z) = cli.zeta {
        spec.query.zeta = z;
        spec.query.zeta_grid = None;
    }
    if let Some(t) = cli.tol {
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::config(format!(
                "tolerance {t} must lie in (0, 1)"
            )));
        }
        spec.compute.tol = t;
    }
    if let Some(s) = cli.seed {
        spec.compute.seed = s;
    }
    if let Some(n) = cli.paths {
        if n == 0 {
            return Err(CliError::config("at least one path is required"));
        }
        spec.compute.paths = n;
    }
    if let Some(f) = cli.format {
        spec.compute.format = f;
    }
    if let Some(o) = &cli.out {
        spec.compute.out = Some(o.display().to_string());
    }
    spec.compute.command = Some(cli.command.name().to_string());
    Ok(spec)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let spec = resolve_spec(cli)?;
    let report = dispatch(&cli.command, &spec)?;
    let text = match spec.compute.format {
        Format::Table => report.to_csv(),
        Format::Document => {
            let mut s = serde_json::to_string_pretty(&report.to_document(&cli.command, &spec))
                .map_err(|e| CliError::numeric(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    match &spec.compute.out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::config(format!("{p}: {e}")))?,
        None => print!("{text}"),
    }
    if !report.flags.is_empty() {
        let mut msg = String::new();
        for f in &report.flags {
            let _ = writeln!(msg, "warning: {f}");
        }
        eprint!("{msg}");
        if matches!(cli.command, Command::VerifyGenerator) {
            return Err(CliError::numeric("generator check failed"));
        }
    }
    Ok(())
}

/// Run one command on a resolved configuration.
pub fn dispatch(command: &Command, spec: &RunSpec) -> Result<Report, CliError> {
    let opts = spec.options();
    let report = match command {
        Command::Validate => cmd_validate(spec)?,
        Command::Kernel { re, im } => cmd_kernel(spec, *re, *im)?,
        Command::Ruin => cmd_ruin(spec, &opts)?,
        Command::Laplace => cmd_laplace(spec, &opts)?,
        Command::Split => cmd_split(spec, &opts)?,
        Command::AsymptX { a } => cmd_asympt_x(spec, &opts, *a)?,
        Command::AsymptLevel => cmd_asympt_level(spec, &opts)?,
        Command::UndershootLimit => cmd_undershoot_limit(spec)?,
        Command::Simulate => cmd_simulate(spec)?,
        Command::VerifyGenerator => cmd_verify(spec, &opts)?,
        Command::Sweep {
            var,
            from,
            to,
            points,
            target,
        } => {
            if *points == 0 || !from.is_finite() || !to.is_finite() {
                return Err(CliError::config(
                    "sweep needs a finite range and at least one point",
                ));
            }
            let grid = linspace(*from, *to, *points);
            cmd_sweep(spec, &opts, *var, &grid, *target)?
        }
    };
    Ok(report)
}
