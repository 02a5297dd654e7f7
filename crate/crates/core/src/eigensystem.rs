//! Moment constants, coefficient systems and partial eigenfunctions of the generator.
//!
//! Three layouts are supported:
//!
//! * `Single`: one family of contours active on `[level, inf)`, used when the level is
//!   approached only by jumps from the side the drift pushes away from, and also for
//!   negative drift with a positive level.
//! * `TwoRegion`: positive drift and negative level. Right-half-plane contours are active
//!   on `[0, inf)`, left-opening contours on `[level, 0)`.
//! * `Finite`: negative drift and negative level. Closed finite contours plus a constant.
//!
//! Everything below the level is `e^{-zeta (level - y)}`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{
    build_gamma_finite, build_gamma_level, build_gamma_positive, integrate, Contour, ContourError,
    FixedRule, QuadratureConfig, Shape, Weight,
};
use crate::kernel::{Kernel, KernelValue};
use crate::model::OuModel;
use crate::quadrature::{integrate_interval, UnitRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigenError {
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error("singular system {0}")]
    SingularSystem(String),
    #[error("system {label} is ill conditioned (condition estimate {condition:.3e})")]
    IllConditioned { label: String, condition: f64 },
    #[error("residual check failed for {label}: row {row}, relative residual {residual:.3e}")]
    Residual {
        label: String,
        row: usize,
        residual: f64,
    },
    #[error("y = {y} is within the difference stencil of the junction {junction}")]
    NearKink { y: f64, junction: f64 },
    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),
}

/// Where wedge vertices sit between the enclosed point and its neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VertexPolicy {
    /// Move the vertex towards the enclosed point as the weight sharpens.
    Adaptive,
    /// Fixed fraction of the admissible interval, measured from its left end.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub quad: QuadratureConfig,
    pub vertex: VertexPolicy,
    /// Right vertex of the diamond contours sits at `mu_i + diamond_offset / (-level)`.
    pub diamond_offset: f64,
    pub condition_limit: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            quad: QuadratureConfig::default(),
            vertex: VertexPolicy::Adaptive,
            diamond_offset: 1.0,
            condition_limit: 1e12,
        }
    }
}

impl SolverOptions {
    /// Contour positioned for the weight `e^{-rate z}`.
    pub fn place(&self, contour: &Contour, rate: f64) -> Contour {
        match self.vertex {
            VertexPolicy::Adaptive => contour.adapted(rate),
            VertexPolicy::Fraction(f) => {
                let v = match contour.shape {
                    Shape::RightWedge { lo, hi, .. } => lo + f * (hi - lo),
                    Shape::LeftWedge { lo, hi, .. } if hi.is_finite() => lo + f * (hi - lo),
                    Shape::LeftWedge { lo, .. } => lo + 2.0 * f,
                    _ => return contour.clone(),
                };
                contour.with_vertex(v).unwrap_or_else(|_| contour.clone())
            }
        }
    }
}

/// Which moment constants to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Single,
    TwoRegion,
    Finite,
}

impl Layout {
    /// Layout used for `model` and `level`.
    pub fn for_level(model: &OuModel, level: f64) -> Result<Layout, EigenError> {
        if level == 0.0 || !level.is_finite() {
            return Err(EigenError::UnsupportedScenario(format!("level {level}")));
        }
        Ok(match (model.kappa > 0.0, level > 0.0) {
            (true, true) | (false, true) => Layout::Single,
            (true, false) => Layout::TwoRegion,
            (false, false) => Layout::Finite,
        })
    }
}

/// Contours used by one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSet {
    /// Right-opening contours, one per downward rate.
    pub positive: Vec<Contour>,
    /// Left-opening contours indexed from `-s` to `r`.
    pub level: Vec<Contour>,
    /// Closed contours for downward rates 2..r.
    pub finite: Vec<Contour>,
}

impl ContourSet {
    pub fn build(
        model: &OuModel,
        layout: Layout,
        level: f64,
        opts: &SolverOptions,
    ) -> Result<ContourSet, EigenError> {
        let r = model.r();
        let s = model.s() as i64;
        let mut set = ContourSet {
            positive: Vec::new(),
            level: Vec::new(),
            finite: Vec::new(),
        };
        match layout {
            Layout::Single => {
                for i in 0..r {
                    set.positive.push(build_gamma_positive(model, i)?);
                }
            }
            Layout::TwoRegion => {
                for i in 0..r {
                    set.positive.push(build_gamma_positive(model, i)?);
                }
                for j in -s..=r as i64 {
                    set.level.push(build_gamma_level(model, j)?);
                }
            }
            Layout::Finite => {
                for i in 1..r {
                    set.finite
                        .push(build_gamma_finite(model, i, level, opts.diamond_offset)?);
                }
            }
        }
        Ok(set)
    }
}

/// Contour integrals entering the coefficient systems. Row index is the contour, column
/// index the rate (`k` for downward, `d` for upward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentConstants {
    pub level: f64,
    /// `int psi(z) / (z - mu_k)` over right-opening contours.
    pub m1: Vec<Vec<Complex64>>,
    /// `int psi(z) / (z + nu_d)` over right-opening contours.
    pub m2: Vec<Vec<Complex64>>,
    /// `int psi(z) / (mu_k - z)` over left-opening contours.
    pub n1: Vec<Vec<Complex64>>,
    /// `int psi(z) / (z + nu_d)` over left-opening contours.
    pub n2: Vec<Vec<Complex64>>,
    /// `int psi(z) e^{-level z} / (z - mu_k)` over left-opening contours.
    pub n3: Vec<Vec<KernelValue>>,
    /// `mu_k int psi(z) e^{-level z} / (z - mu_k)` over right-opening contours.
    pub mthm1: Vec<Vec<KernelValue>>,
    /// `int psi(z) e^{-level z} / (z - mu_k)` over the closed contours.
    pub mfinite: Vec<Vec<KernelValue>>,
    /// Largest quadrature error relative to the size of the integral (or to one, for
    /// integrals smaller than one).
    pub max_rel_error: f64,
    pub evaluations: usize,
}

#[cfg(feature = "parallel")]
fn map_jobs<T: Send, R: Send>(jobs: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    jobs.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T, R>(jobs: Vec<T>, f: impl Fn(T) -> R) -> Vec<R> {
    jobs.into_iter().map(f).collect()
}

#[derive(Clone, Copy)]
enum Slot {
    M1,
    M2,
    N1,
    N2,
    N3,
    Thm1,
    Finite,
}

pub fn compute_moments(
    model: &OuModel,
    set: &ContourSet,
    level: f64,
    layout: Layout,
    opts: &SolverOptions,
) -> Result<MomentConstants, EigenError> {
    let (r, s) = (model.r(), model.s());
    let mus = model.mus();
    let nus = model.nus();
    let mut jobs: Vec<(Slot, usize, usize, &Contour, Weight)> = Vec::new();
    match layout {
        Layout::Single => {
            for (i, g) in set.positive.iter().enumerate() {
                for k in 0..r {
                    jobs.push((Slot::Thm1, i, k, g, Weight::exp_pole(level, mus[k])));
                }
            }
        }
        Layout::TwoRegion => {
            for (i, g) in set.positive.iter().enumerate() {
                for k in 0..r {
                    jobs.push((Slot::M1, i, k, g, Weight::pole(mus[k])));
                }
                for d in 0..s {
                    jobs.push((Slot::M2, i, d, g, Weight::pole(-nus[d])));
                }
            }
            for (j, g) in set.level.iter().enumerate() {
                for k in 0..r {
                    jobs.push((Slot::N1, j, k, g, Weight::pole(mus[k])));
                    jobs.push((Slot::N3, j, k, g, Weight::exp_pole(level, mus[k])));
                }
                for d in 0..s {
                    jobs.push((Slot::N2, j, d, g, Weight::pole(-nus[d])));
                }
            }
        }
        Layout::Finite => {
            for (i, g) in set.finite.iter().enumerate() {
                for k in 0..r {
                    jobs.push((Slot::Finite, i, k, g, Weight::exp_pole(level, mus[k])));
                }
            }
        }
    }
    let results = map_jobs(jobs, |(slot, i, k, g, w)| {
        let placed = opts.place(g, w.rate);
        integrate(model, &placed, &w, &opts.quad).map(|res| (slot, i, k, res))
    });
    let zero = Complex64::new(0.0, 0.0);
    let kz = KernelValue::from_complex(zero);
    let mut out = MomentConstants {
        level,
        m1: vec![vec![zero; r]; set.positive.len()],
        m2: vec![vec![zero; s]; set.positive.len()],
        n1: vec![vec![zero; r]; set.level.len()],
        n2: vec![vec![zero; s]; set.level.len()],
        n3: vec![vec![kz; r]; set.level.len()],
        mthm1: vec![vec![kz; r]; set.positive.len()],
        mfinite: vec![vec![kz; r]; set.finite.len()],
        max_rel_error: 0.0,
        evaluations: 0,
    };
    for res in results {
        let (slot, i, k, res) = res?;
        out.evaluations += res.evaluations;
        // Integrals that vanish by Cauchy's theorem are judged by absolute error.
        let size = res
            .value
            .value
            .norm()
            .max((-res.value.log_scale).exp().min(1.0));
        out.max_rel_error = out.max_rel_error.max(res.error / size);
        match slot {
            Slot::M1 => out.m1[i][k] = res.to_complex(),
            Slot::M2 => out.m2[i][k] = res.to_complex(),
            Slot::N1 => out.n1[i][k] = -res.to_complex(),
            Slot::N2 => out.n2[i][k] = res.to_complex(),
            Slot::N3 => out.n3[i][k] = res.value,
            Slot::Thm1 => out.mthm1[i][k] = res.value.scale(Complex64::new(mus[k], 0.0)),
            Slot::Finite => out.mfinite[i][k] = res.value,
        }
    }
    Ok(out)
}

/// Square complex system whose entries may carry large exponential scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub label: String,
    /// Row-major entries.
    pub matrix: Vec<Vec<KernelValue>>,
    pub rhs: Vec<Complex64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl LinearSystem {
    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn factorize(&self) -> Result<Factorization, EigenError> {
        Factorization::new(self)
    }

    pub fn determinant(&self) -> Result<KernelValue, EigenError> {
        Ok(self.factorize()?.determinant())
    }
}

/// LU factorization of an equilibrated system.
///
/// Columns are scaled by their largest entry (in log space), then rows by their largest
/// mantissa; the condition estimate refers to the equilibrated matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    label: String,
    scaled: DMatrix<Complex64>,
    lu: nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    col_log: Vec<f64>,
    row_norm: Vec<f64>,
    pub condition: f64,
}

fn norm1(m: &DMatrix<Complex64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl Factorization {
    fn new(sys: &LinearSystem) -> Result<Factorization, EigenError> {
        let n = sys.dim();
        if sys.matrix.len() != n || sys.matrix.iter().any(|row| row.len() != n) {
            return Err(EigenError::SingularSystem(format!(
                "{}: not square",
                sys.label
            )));
        }
        let mut col_log = vec![f64::NEG_INFINITY; n];
        for row in &sys.matrix {
            for (c, v) in row.iter().enumerate() {
                if v.value.norm() > 0.0 {
                    col_log[c] = col_log[c].max(v.ln_abs());
                }
            }
        }
        if let Some(c) = col_log.iter().position(|v| !v.is_finite()) {
            return Err(EigenError::SingularSystem(format!(
                "{}: column {} vanishes",
                sys.label, sys.col_labels[c]
            )));
        }
        let mut scaled = DMatrix::from_fn(n, n, |r, c| sys.matrix[r][c].at_scale(col_log[c]));
        let mut row_norm = vec![0.0; n];
        for r in 0..n {
            let m = scaled.row(r).iter().map(|v| v.norm()).fold(0.0, f64::max);
            if m == 0.0 || !m.is_finite() {
                return Err(EigenError::SingularSystem(format!(
                    "{}: row {} vanishes",
                    sys.label, sys.row_labels[r]
                )));
            }
            row_norm[r] = m;
            for c in 0..n {
                scaled[(r, c)] /= m;
            }
        }
        let lu = scaled.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| EigenError::SingularSystem(sys.label.clone()))?;
        let condition = norm1(&scaled) * norm1(&inv);
        if !condition.is_finite() {
            return Err(EigenError::SingularSystem(sys.label.clone()));
        }
        Ok(Factorization {
            label: sys.label.clone(),
            scaled,
            lu,
            col_log,
            row_norm,
            condition,
        })
    }

    /// `det` of the original matrix.
    pub fn determinant(&self) -> KernelValue {
        let d = self.lu.determinant();
        let log: f64 =
            self.col_log.iter().sum::<f64>() + self.row_norm.iter().map(|v| v.ln()).sum::<f64>();
        KernelValue::new(d, log)
    }

    /// Solve with a right-hand side whose entries carry their own scales.
    pub fn solve_scaled(&self, rhs: &[KernelValue], limit: f64) -> Result<Solution, EigenError> {
        let top = rhs
            .iter()
            .filter(|v| v.value.norm() > 0.0)
            .map(|v| v.ln_abs())
            .fold(f64::NEG_INFINITY, f64::max);
        let top = if top.is_finite() { top } else { 0.0 };
        let b: Vec<Complex64> = rhs.iter().map(|v| v.at_scale(top)).collect();
        let mut sol = self.solve(&b, limit)?;
        for c in &mut sol.coefficients {
            c.log_scale += top;
        }
        Ok(sol)
    }

    /// Solve for one right-hand side, refusing if the condition estimate exceeds `limit`.
    pub fn solve(&self, rhs: &[Complex64], limit: f64) -> Result<Solution, EigenError> {
        if self.condition > limit {
            return Err(EigenError::IllConditioned {
                label: self.label.clone(),
                condition: self.condition,
            });
        }
        let n = self.row_norm.len();
        let b = nalgebra::DVector::from_fn(n, |r, _| rhs[r] / self.row_norm[r]);
        let y = self
            .lu
            .solve(&b)
            .ok_or_else(|| EigenError::SingularSystem(self.label.clone()))?;
        let mut worst = 0.0f64;
        for r in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut mag = b[r].norm();
            for c in 0..n {
                acc += self.scaled[(r, c)] * y[c];
                mag += self.scaled[(r, c)].norm() * y[c].norm();
            }
            let res = (acc - b[r]).norm();
            let rel = if mag > 0.0 { res / mag } else { 0.0 };
            if !(rel <= 1e-10) {
                return Err(EigenError::Residual {
                    label: self.label.clone(),
                    row: r,
                    residual: rel,
                });
            }
            worst = worst.max(rel);
        }
        Ok(Solution {
            coefficients: (0..n)
                .map(|c| KernelValue::new(y[c], -self.col_log[c]))
                .collect(),
            condition: self.condition,
            residual: worst,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub coefficients: Vec<KernelValue>,
    pub condition: f64,
    /// Largest row-wise relative residual.
    pub residual: f64,
}

pub fn solve(system: &LinearSystem, condition_limit: f64) -> Result<Solution, EigenError> {
    system.factorize()?.solve(&system.rhs, condition_limit)
}

fn re(v: f64) -> Complex64 {
    Complex64::new(v, 0.0)
}

fn kv_add(a: KernelValue, b: KernelValue) -> KernelValue {
    let ls = if a.value.norm() == 0.0 {
        b.log_scale
    } else if b.value.norm() == 0.0 {
        a.log_scale
    } else {
        a.log_scale.max(b.log_scale)
    };
    KernelValue::new(a.at_scale(ls) + b.at_scale(ls), ls)
}

fn kv_div(a: KernelValue, b: KernelValue) -> KernelValue {
    KernelValue::new(a.value / b.value, a.log_scale - b.log_scale)
}

/// Right-hand side `-mu_k / (mu_k + zeta)` of the single-family system.
pub fn single_region_rhs(model: &OuModel, zeta: f64) -> Vec<Complex64> {
    model.mus().iter().map(|m| re(-m / (m + zeta))).collect()
}

/// Right-hand side of the two-region system.
pub fn two_region_rhs(model: &OuModel, zeta: f64) -> Vec<Complex64> {
    let mut rhs: Vec<Complex64> = model.mus().iter().map(|m| re(-1.0 / (m + zeta))).collect();
    rhs.resize(2 * model.r() + model.s(), re(0.0));
    rhs
}

/// Right-hand side `-1 / (mu_k + zeta)` of the negative-drift system.
pub fn finite_rhs(model: &OuModel, zeta: f64) -> Vec<Complex64> {
    model.mus().iter().map(|m| re(-1.0 / (m + zeta))).collect()
}

pub fn assemble_single(model: &OuModel, zeta: f64, moments: &MomentConstants) -> LinearSystem {
    let r = model.r();
    LinearSystem {
        label: format!("single family, level {}", moments.level),
        matrix: (0..r)
            .map(|k| (0..r).map(|i| moments.mthm1[i][k]).collect())
            .collect(),
        rhs: single_region_rhs(model, zeta),
        row_labels: (1..=r).map(|k| format!("mu_{k}")).collect(),
        col_labels: (1..=r).map(|i| format!("c_{i}")).collect(),
    }
}

/// Two-region system. Without `tilde` the left-opening contours `-s..r-1` are used,
/// with it `-s+1..r`.
pub fn assemble_a(
    model: &OuModel,
    zeta: f64,
    moments: &MomentConstants,
    tilde: bool,
) -> LinearSystem {
    let (r, s) = (model.r(), model.s());
    let first = usize::from(tilde);
    let js: Vec<usize> = (first..first + r + s).collect();
    let kz = KernelValue::from_complex(re(0.0));
    let mut matrix = Vec::new();
    let mut row_labels = Vec::new();
    for k in 0..r {
        let mut row = vec![kz; r];
        row.extend(js.iter().map(|&j| moments.n3[j][k]));
        matrix.push(row);
        row_labels.push(format!("level moment mu_{}", k + 1));
    }
    for k in 0..r {
        let mut row: Vec<KernelValue> = (0..r)
            .map(|i| KernelValue::from_complex(moments.m1[i][k]))
            .collect();
        row.extend(
            js.iter()
                .map(|&j| KernelValue::from_complex(moments.n1[j][k])),
        );
        matrix.push(row);
        row_labels.push(format!("downward mu_{}", k + 1));
    }
    for d in 0..s {
        let mut row: Vec<KernelValue> = (0..r)
            .map(|i| KernelValue::from_complex(-moments.m2[i][d]))
            .collect();
        row.extend(
            js.iter()
                .map(|&j| KernelValue::from_complex(moments.n2[j][d])),
        );
        matrix.push(row);
        row_labels.push(format!("upward nu_{}", d + 1));
    }
    let mut col_labels: Vec<String> = (1..=r).map(|i| format!("c_{i}")).collect();
    col_labels.extend(js.iter().map(|&j| format!("b_{}", j as i64 - s as i64)));
    LinearSystem {
        label: format!(
            "two-region{}, level {}",
            if tilde { " (shifted)" } else { "" },
            moments.level
        ),
        matrix,
        rhs: two_region_rhs(model, zeta),
        row_labels,
        col_labels,
    }
}

pub fn assemble_b(model: &OuModel, zeta: f64, moments: &MomentConstants) -> LinearSystem {
    let r = model.r();
    let mus = model.mus();
    let matrix = (0..r)
        .map(|k| {
            let mut row = vec![KernelValue::from_complex(re(-1.0 / mus[k]))];
            row.extend((0..r - 1).map(|i| moments.mfinite[i][k]));
            row
        })
        .collect();
    let mut col_labels = vec!["U".to_string()];
    col_labels.extend((2..=r).map(|i| format!("c_{i}")));
    LinearSystem {
        label: format!("negative drift, level {}", moments.level),
        matrix,
        rhs: finite_rhs(model, zeta),
        row_labels: (1..=r).map(|k| format!("mu_{k}")).collect(),
        col_labels,
    }
}

/// A contour term `coefficient * int psi(z) e^{-y z} dz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coefficient: KernelValue,
    pub contour: Contour,
}

/// A solved partial eigenfunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenfunction {
    pub model: OuModel,
    pub zeta: f64,
    pub level: f64,
    pub layout: Layout,
    /// Active on `[level, inf)`, or on `[0, inf)` for the two-region layout.
    pub upper: Vec<Term>,
    /// Active on `[level, 0)` in the two-region layout.
    pub lower: Vec<Term>,
    /// Constant added on `[level, inf)`.
    pub constant: Complex64,
    pub include_f0: bool,
    pub options: SolverOptions,
    pub condition: f64,
    pub residual: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Region {
    Below,
    Upper,
    Lower,
}

impl Eigenfunction {
    fn region(&self, y: f64) -> Region {
        if y < self.level {
            Region::Below
        } else if self.layout == Layout::TwoRegion && y < 0.0 {
            Region::Lower
        } else {
            Region::Upper
        }
    }

    fn below(&self, y: f64) -> Complex64 {
        if self.include_f0 {
            re((-self.zeta * (self.level - y)).exp())
        } else {
            re(0.0)
        }
    }

    /// Value at `y`, each contour integral computed adaptively.
    pub fn eval(&self, y: f64) -> Result<Complex64, EigenError> {
        let terms = match self.region(y) {
            Region::Below => return Ok(self.below(y)),
            Region::Upper => &self.upper,
            Region::Lower => &self.lower,
        };
        let mut sum = self.constant;
        for t in terms {
            let g = self.options.place(&t.contour, y);
            let v = integrate(&self.model, &g, &Weight::exp(y), &self.options.quad)?;
            sum += t.coefficient.mul(&v.value).to_complex();
        }
        Ok(sum)
    }

    /// Precompute node rules for repeated evaluation on `[level, y_max]`.
    ///
    /// Upper contour terms are prepared up to `y_max + reach` so that jump integrals
    /// starting below `y_max` stay inside the prepared range.
    pub fn prepare(
        &self,
        y_max: f64,
        reach: f64,
        tol: f64,
    ) -> Result<PreparedEigenfunction, EigenError> {
        let kernel = Kernel::psi(&self.model);
        let hi = y_max.max(self.level) + reach;
        let upper_lo = if self.layout == Layout::TwoRegion {
            0.0
        } else {
            self.level
        };
        let mut upper = Vec::new();
        for t in &self.upper {
            let extreme = if self.layout == Layout::Finite {
                upper_lo
            } else {
                hi
            };
            let g = self.options.place(&t.contour, extreme);
            upper.push((
                t.coefficient,
                FixedRule::build(&kernel, &g, upper_lo, hi, tol, &self.options.quad)?,
            ));
        }
        let mut lower = Vec::new();
        for t in &self.lower {
            let g = self.options.place(&t.contour, self.level);
            lower.push((
                t.coefficient,
                FixedRule::build(&kernel, &g, self.level, 0.0, tol, &self.options.quad)?,
            ));
        }
        Ok(PreparedEigenfunction {
            f: self.clone(),
            upper,
            lower,
            upper_range: (upper_lo, hi),
        })
    }
}

/// Value of a solved eigenfunction at `y`.
pub fn eval_eigenfunction(f: &Eigenfunction, y: f64) -> Result<Complex64, EigenError> {
    f.eval(y)
}

/// An eigenfunction with frozen node rules; falls back to adaptive evaluation outside
/// the prepared range.
#[derive(Debug, Clone)]
pub struct PreparedEigenfunction {
    pub f: Eigenfunction,
    upper: Vec<(KernelValue, FixedRule)>,
    lower: Vec<(KernelValue, FixedRule)>,
    upper_range: (f64, f64),
}

impl PreparedEigenfunction {
    pub fn eval(&self, y: f64) -> Result<Complex64, EigenError> {
        let rules = match self.f.region(y) {
            Region::Below => return Ok(self.f.below(y)),
            Region::Upper if y > self.upper_range.1 => return self.f.eval(y),
            Region::Upper => &self.upper,
            Region::Lower => &self.lower,
        };
        let mut sum = self.f.constant;
        for (c, rule) in rules {
            sum += c.mul(&rule.eval(y)).to_complex();
        }
        Ok(sum)
    }

    /// Total number of frozen nodes.
    pub fn nodes(&self) -> usize {
        self.upper
            .iter()
            .chain(&self.lower)
            .map(|(_, r)| r.len())
            .sum()
    }
}

/// Moments and factorizations for one model and level, reusable across `zeta`.
#[derive(Debug, Clone)]
pub struct PreparedLevel {
    pub model: OuModel,
    pub level: f64,
    pub layout: Layout,
    pub options: SolverOptions,
    pub contours: ContourSet,
    pub moments: MomentConstants,
    pub systems: Vec<LinearSystem>,
    factors: Vec<Factorization>,
    /// Two-region layout: whether the shifted system is usable as written.
    pub shifted_regular: bool,
    /// Two-region layout: coefficients `(c_1..c_r, b_{-s}..b_r)` of the harmonic function
    /// that vanishes below the level, normalised to 1 at the level.
    pub creeping: Option<Vec<KernelValue>>,
}

impl PreparedLevel {
    pub fn new(
        model: &OuModel,
        level: f64,
        options: &SolverOptions,
    ) -> Result<PreparedLevel, EigenError> {
        let layout = Layout::for_level(model, level)?;
        let contours = ContourSet::build(model, layout, level, options)?;
        let moments = compute_moments(model, &contours, level, layout, options)?;
        let systems = match layout {
            Layout::Single => vec![assemble_single(model, 0.0, &moments)],
            Layout::TwoRegion => vec![
                assemble_a(model, 0.0, &moments, false),
                assemble_a(model, 0.0, &moments, true),
            ],
            Layout::Finite => vec![assemble_b(model, 0.0, &moments)],
        };
        let mut factors = Vec::new();
        let mut shifted_regular = true;
        for (n, sys) in systems.iter().enumerate() {
            match sys.factorize() {
                Ok(f) if n == 0 || f.condition <= options.condition_limit => factors.push(f),
                Ok(_) | Err(EigenError::SingularSystem(_)) if n == 1 => shifted_regular = false,
                Ok(_) => unreachable!(),
                Err(e) => return Err(e),
            }
        }
        let mut prepared = PreparedLevel {
            model: model.clone(),
            level,
            layout,
            options: *options,
            contours,
            moments,
            systems,
            factors,
            shifted_regular,
            creeping: None,
        };
        if layout == Layout::TwoRegion {
            prepared.creeping = Some(prepared.creeping_coefficients()?);
        }
        Ok(prepared)
    }

    /// Null vector of the homogeneous two-region equations over all left-opening contours.
    ///
    /// The unshifted system is regular, so fixing the coefficient of the last contour to
    /// one determines the rest.
    fn creeping_coefficients(&self) -> Result<Vec<KernelValue>, EigenError> {
        let model = &self.model;
        let (r, s) = (model.r(), model.s());
        let last = r + s;
        let m = &self.moments;
        let mut rhs = Vec::with_capacity(2 * r + s);
        for k in 0..r {
            rhs.push(m.n3[last][k].scale(re(-1.0)));
        }
        for k in 0..r {
            rhs.push(KernelValue::from_complex(-m.n1[last][k]));
        }
        for d in 0..s {
            rhs.push(KernelValue::from_complex(-m.n2[last][d]));
        }
        let sol = self.factors[0].solve_scaled(&rhs, self.options.condition_limit)?;
        let mut coef = sol.coefficients;
        coef.push(KernelValue::from_complex(re(1.0)));
        let mut at_level = KernelValue::from_complex(re(0.0));
        for (j, g) in self.contours.level.iter().enumerate() {
            let placed = self.options.place(g, self.level);
            let v = integrate(model, &placed, &Weight::exp(self.level), &self.options.quad)?;
            at_level = kv_add(at_level, coef[r + j].mul(&v.value));
        }
        if at_level.value.norm() == 0.0 || !at_level.ln_abs().is_finite() {
            return Err(EigenError::SingularSystem(
                "harmonic function vanishing below the level is zero at the level".into(),
            ));
        }
        Ok(coef.into_iter().map(|c| kv_div(c, at_level)).collect())
    }

    /// Largest condition estimate over the systems.
    pub fn condition(&self) -> f64 {
        self.factors.iter().map(|f| f.condition).fold(0.0, f64::max)
    }

    pub fn determinants(&self) -> Vec<KernelValue> {
        self.factors.iter().map(|f| f.determinant()).collect()
    }

    /// Solved eigenfunctions for `zeta`: one for the single and finite layouts, two for
    /// the two-region layout (unshifted, shifted).
    pub fn eigenfunctions(&self, zeta: f64) -> Result<Vec<Eigenfunction>, EigenError> {
        let model = &self.model;
        let r = model.r();
        let base = Eigenfunction {
            model: model.clone(),
            zeta,
            level: self.level,
            layout: self.layout,
            upper: Vec::new(),
            lower: Vec::new(),
            constant: re(0.0),
            include_f0: true,
            options: self.options,
            condition: 0.0,
            residual: 0.0,
        };
        let limit = self.options.condition_limit;
        match self.layout {
            Layout::Single => {
                let sol = self.factors[0].solve(&single_region_rhs(model, zeta), limit)?;
                let upper = self
                    .contours
                    .positive
                    .iter()
                    .zip(&sol.coefficients)
                    .map(|(g, c)| Term {
                        coefficient: *c,
                        contour: g.clone(),
                    })
                    .collect();
                Ok(vec![Eigenfunction {
                    upper,
                    condition: sol.condition,
                    residual: sol.residual,
                    ..base
                }])
            }
            Layout::TwoRegion => {
                let rhs = two_region_rhs(model, zeta);
                let n_level = self.contours.level.len();
                let kz = KernelValue::from_complex(re(0.0));
                let mut coefs = Vec::new();
                let sol = self.factors[0].solve(&rhs, limit)?;
                let mut first = sol.coefficients[..r].to_vec();
                first.extend_from_slice(&sol.coefficients[r..]);
                first.push(kz);
                coefs.push((first, sol.condition, sol.residual));
                if self.shifted_regular {
                    let sol = self.factors[1].solve(&rhs, limit)?;
                    let mut second = sol.coefficients[..r].to_vec();
                    second.push(kz);
                    second.extend_from_slice(&sol.coefficients[r..]);
                    coefs.push((second, sol.condition, sol.residual));
                } else {
                    let g = self.creeping.as_ref().expect("two-region layout");
                    let second = coefs[0]
                        .0
                        .iter()
                        .zip(g)
                        .map(|(a, b)| kv_add(*a, *b))
                        .collect();
                    coefs.push((second, coefs[0].1, coefs[0].2));
                }
                let mut out = Vec::new();
                for (coef, condition, residual) in coefs {
                    debug_assert_eq!(coef.len(), r + n_level);
                    let upper = self
                        .contours
                        .positive
                        .iter()
                        .zip(&coef[..r])
                        .map(|(g, c)| Term {
                            coefficient: *c,
                            contour: g.clone(),
                        })
                        .collect();
                    let lower = self
                        .contours
                        .level
                        .iter()
                        .zip(&coef[r..])
                        .filter(|(_, c)| c.value.norm() != 0.0)
                        .map(|(g, c)| Term {
                            coefficient: *c,
                            contour: g.clone(),
                        })
                        .collect();
                    out.push(Eigenfunction {
                        upper,
                        lower,
                        condition,
                        residual,
                        ..base.clone()
                    });
                }
                Ok(out)
            }
            Layout::Finite => {
                let sol = self.factors[0].solve(&finite_rhs(model, zeta), limit)?;
                let upper = self
                    .contours
                    .finite
                    .iter()
                    .zip(&sol.coefficients[1..])
                    .map(|(g, c)| Term {
                        coefficient: *c,
                        contour: g.clone(),
                    })
                    .collect();
                Ok(vec![Eigenfunction {
                    upper,
                    constant: sol.coefficients[0].to_complex(),
                    condition: sol.condition,
                    residual: sol.residual,
                    ..base
                }])
            }
        }
    }
}

/// Numeric generator image `kappa y f'(y) + lambda int (f(y + u) - f(y)) G(du)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorImage {
    pub value: Complex64,
    pub drift: Complex64,
    pub jump: Complex64,
    pub f_value: Complex64,
    /// `|kappa y f'(y)| + lambda |f(y)|`, the natural size of the image.
    pub scale: f64,
    pub converged: bool,
}

impl GeneratorImage {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.value.norm() / self.scale
        } else {
            self.value.norm()
        }
    }
}

/// Upward jump tails are cut where the slowest exponential has decayed by
/// `e^{-TAIL_DECAYS}`. Downward tails land below the level, where evaluation is cheap,
/// and are integrated in full.
const TAIL_DECAYS: f64 = 36.0;

/// Apply the generator to `f` at `y`, away from the points in `junctions` where `f`
/// is not smooth.
pub fn apply_generator<F>(
    model: &OuModel,
    f: F,
    y: f64,
    junctions: &[f64],
) -> Result<GeneratorImage, EigenError>
where
    F: Fn(f64) -> Result<Complex64, EigenError>,
{
    let h = 1e-4 * y.abs().max(1.0);
    for &j in junctions {
        if (y - j).abs() < 10.0 * h {
            return Err(EigenError::NearKink { y, junction: j });
        }
    }
    let fy = f(y)?;
    let d = (f(y - 2.0 * h)? - 8.0 * f(y - h)? + 8.0 * f(y + h)? - f(y + 2.0 * h)?) / (12.0 * h);
    let drift = d * (model.kappa * y);

    let rule = UnitRule {
        rel_tol: 1e-9,
        abs_tol: 1e-12 * fy.norm(),
        ..UnitRule::default()
    };
    let mut err: Option<EigenError> = None;
    let mut jump = Complex64::new(0.0, 0.0);
    let mut converged = true;
    let mut side = |lo: f64, hi: f64, scale: f64| {
        let mut cuts: Vec<f64> = junctions
            .iter()
            .map(|j| j - y)
            .filter(|u| *u > lo && *u < hi)
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut edges = vec![lo];
        edges.extend(cuts);
        edges.push(hi);
        for w in edges.windows(2) {
            let res = integrate_interval(
                |u| {
                    if err.is_some() {
                        return Complex64::new(0.0, 0.0);
                    }
                    match f(y + u) {
                        Ok(v) => v * model.jump_density(u),
                        Err(e) => {
                            err = Some(e);
                            Complex64::new(0.0, 0.0)
                        }
                    }
                },
                w[0],
                w[1],
                scale,
                &rule,
            );
            jump += res.value;
            converged &= res.converged;
        }
    };
    if model.r() > 0 {
        let mu1 = model.mus()[0];
        side(f64::NEG_INFINITY, 0.0, 1.0 / mu1);
    }
    if model.s() > 0 {
        let nu1 = model.nus()[0];
        side(0.0, TAIL_DECAYS / nu1, 1.0 / nu1);
    }
    if let Some(e) = err {
        return Err(e);
    }
    let jump = (jump - fy) * model.lambda;
    Ok(GeneratorImage {
        value: drift + jump,
        drift,
        jump,
        f_value: fy,
        scale: drift.norm() + model.lambda * fy.norm(),
        converged,
    })
}

/// Generator residuals of a solved eigenfunction on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub points: Vec<(f64, GeneratorImage)>,
    pub max_relative: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Check `A f = 0` at `points` (points near junctions are skipped). `tolerance` applies
/// to `|A f| / scale`.
pub fn verify_generator(
    f: &Eigenfunction,
    points: &[f64],
    tolerance: f64,
) -> Result<GeneratorReport, EigenError> {
    let y_max = points.iter().cloned().fold(f.level, f64::max);
    let model = &f.model;
    let reach = if model.s() > 0 {
        TAIL_DECAYS / model.nus()[0]
    } else {
        0.0
    };
    let fast = f.prepare(y_max + 1.0, reach, 1e-11)?;
    let mut junctions = vec![f.level];
    if f.layout == Layout::TwoRegion {
        junctions.push(0.0);
    }
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    let mut passed = true;
    for &y in points {
        let img = match apply_generator(model, |u| fast.eval(u), y, &junctions) {
            Err(EigenError::NearKink { .. }) => continue,
            other => other?,
        };
        let rel = img.relative();
        worst = worst.max(rel);
        passed &= rel <= tolerance && img.converged;
        out.push((y, img));
    }
    Ok(GeneratorReport {
        points: out,
        max_relative: worst,
        tolerance,
        passed,
    })
}
