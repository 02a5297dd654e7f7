//! Ruin probabilities, the undershoot transform and their asymptotics.
//!
//! For a start `x` above the level `l` the crossing time is `tau = inf{t : X_t <= l}` and
//! the undershoot is `Z = l - X_tau`. The event `{tau < infinity}` splits into a jump
//! crossing `A_j` and a continuous crossing `A_c`. Every functional here is obtained by
//! evaluating one or two solved eigenfunctions at `x` and at `l`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{
    build_gamma_level, build_gamma_positive, build_reference, integrate, integrate_kernel,
    ContourError, ReferenceKind, Weight,
};
use crate::eigensystem::{
    compute_moments, solve, ContourSet, EigenError, Eigenfunction, Layout, LinearSystem,
    PreparedLevel, SolverOptions,
};
use crate::kernel::{psi_excluding_principal, Kernel, KernelValue};
use crate::model::{OuModel, PointKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuinError {
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error("invalid query: {0}")]
    BadQuery(String),
    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),
    #[error("degenerate denominator {what} = {value:.3e}")]
    DegenerateDenominator { what: String, value: f64 },
}

impl From<crate::kernel::KernelError> for RuinError {
    fn from(e: crate::kernel::KernelError) -> Self {
        RuinError::Contour(ContourError::Kernel(e))
    }
}

/// Start, level and Laplace argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub x: f64,
    pub level: f64,
    pub zeta: f64,
}

impl Query {
    pub fn new(x: f64, level: f64, zeta: f64) -> Result<Query, RuinError> {
        let q = Query { x, level, zeta };
        q.check()?;
        Ok(q)
    }

    fn check(&self) -> Result<(), RuinError> {
        if !(self.x.is_finite() && self.level.is_finite() && self.zeta.is_finite()) {
            return Err(RuinError::BadQuery("non-finite input".into()));
        }
        if self.x <= self.level {
            return Err(RuinError::BadQuery(format!(
                "start {} must lie above the level {}",
                self.x, self.level
            )));
        }
        if self.zeta < 0.0 {
            return Err(RuinError::BadQuery(format!(
                "negative Laplace argument {}",
                self.zeta
            )));
        }
        if self.level == 0.0 {
            return Err(RuinError::BadQuery("the level must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResultKind {
    /// `E[e^{-zeta Z}; A_j]`.
    LaplaceJump,
    /// `P(tau < infinity)`.
    RuinProb,
    /// `P(A_j)`.
    SplitJump,
    /// `P(A_c)`.
    SplitCont,
}

impl ResultKind {
    pub fn is_probability(self) -> bool {
        !matches!(self, ResultKind::LaplaceJump)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub layout: Layout,
    /// Largest condition estimate of the coefficient systems.
    pub condition: f64,
    /// Largest relative residual of the coefficient solves.
    pub residual: f64,
    /// Largest relative quadrature error among the moment constants.
    pub quadrature_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuinResult {
    pub value: f64,
    pub imag_residual: f64,
    pub kind: ResultKind,
    pub diagnostics: Diagnostics,
}

impl RuinResult {
    fn new(v: Complex64, kind: ResultKind, diagnostics: Diagnostics) -> Self {
        RuinResult {
            value: v.re,
            imag_residual: v.im.abs(),
            kind,
            diagnostics,
        }
    }

    fn exact(value: f64, kind: ResultKind, diagnostics: Diagnostics) -> Self {
        RuinResult {
            value,
            imag_residual: 0.0,
            kind,
            diagnostics,
        }
    }

    /// Probability outputs must lie in `[0, 1]` up to `slack`, and every output must be
    /// real up to `slack`.
    pub fn within_invariants(&self, slack: f64) -> bool {
        let range = !self.kind.is_probability() || (-slack..=1.0 + slack).contains(&self.value);
        range && self.imag_residual <= slack && self.value.is_finite()
    }
}

/// The transform on the jump event, plus `P(A_c)` when creeping is possible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceOutcome {
    pub jump: RuinResult,
    pub continuous: Option<RuinResult>,
}

/// Solved eigenfunctions for one model, level and `zeta`, reusable across starts.
#[derive(Debug, Clone)]
pub struct FirstPassage {
    pub prepared: PreparedLevel,
    pub zeta: f64,
    pub functions: Vec<Eigenfunction>,
    /// Eigenfunction values at the level.
    pub at_level: Vec<Complex64>,
    pub diagnostics: Diagnostics,
}

impl FirstPassage {
    pub fn new(
        model: &OuModel,
        level: f64,
        zeta: f64,
        opts: &SolverOptions,
    ) -> Result<FirstPassage, RuinError> {
        if model.kappa < 0.0 && level > 0.0 && zeta > 0.0 {
            return Err(RuinError::UnsupportedScenario(
                "negative drift with a positive level needs zeta = 0".into(),
            ));
        }
        if level == 0.0 || !level.is_finite() {
            return Err(RuinError::BadQuery("the level must be non-zero".into()));
        }
        if !(zeta >= 0.0 && zeta.is_finite()) {
            return Err(RuinError::BadQuery(format!("Laplace argument {zeta}")));
        }
        let prepared = PreparedLevel::new(model, level, opts)?;
        Self::from_prepared(prepared, zeta)
    }

    /// Reuse moments and factorizations already computed for the level.
    pub fn from_prepared(prepared: PreparedLevel, zeta: f64) -> Result<FirstPassage, RuinError> {
        let functions = prepared.eigenfunctions(zeta)?;
        let at_level = functions
            .iter()
            .map(|f| f.eval(prepared.level))
            .collect::<Result<Vec<_>, _>>()?;
        let diagnostics = Diagnostics {
            layout: prepared.layout,
            condition: prepared.condition(),
            residual: functions.iter().map(|f| f.residual).fold(0.0, f64::max),
            quadrature_error: prepared.moments.max_rel_error,
        };
        Ok(FirstPassage {
            prepared,
            zeta,
            functions,
            at_level,
            diagnostics,
        })
    }

    pub fn model(&self) -> &OuModel {
        &self.prepared.model
    }

    pub fn level(&self) -> f64 {
        self.prepared.level
    }

    fn check_start(&self, x: f64) -> Result<(), RuinError> {
        Query {
            x,
            level: self.level(),
            zeta: self.zeta,
        }
        .check()
    }

    /// Eigenfunction values at `x`.
    pub fn values(&self, x: f64) -> Result<Vec<Complex64>, RuinError> {
        Ok(self
            .functions
            .iter()
            .map(|f| f.eval(x))
            .collect::<Result<Vec<_>, _>>()?)
    }

    /// Solve `J + f_i(l) C = f_i(x)` for the jump transform `J` and `C = P(A_c)`.
    fn two_by_two(&self, fx: &[Complex64]) -> Result<(Complex64, Complex64), RuinError> {
        let (a, b) = (self.at_level[0], self.at_level[1]);
        let den = b - a;
        let size = a.norm().max(b.norm()).max(1.0);
        if den.norm() <= 1e-12 * size {
            return Err(RuinError::DegenerateDenominator {
                what: "f_2(level) - f_1(level)".into(),
                value: den.norm(),
            });
        }
        let jump = (fx[0] * b - fx[1] * a) / den;
        let cont = (fx[1] - fx[0]) / den;
        Ok((jump, cont))
    }

    /// `P(A_c)` for negative drift and a positive level, from `P(A_j) + f(l) P(A_c) = f(x)`
    /// and `P(A_j) + P(A_c) = 1`.
    fn recurrent_cont(&self, fx: Complex64) -> Result<Complex64, RuinError> {
        let den = self.at_level[0] - 1.0;
        if den.norm() <= 1e-12 {
            return Err(RuinError::DegenerateDenominator {
                what: "f(level) - 1".into(),
                value: den.norm(),
            });
        }
        Ok((fx - 1.0) / den)
    }

    pub fn laplace(&self, x: f64) -> Result<LaplaceOutcome, RuinError> {
        self.check_start(x)?;
        let d = self.diagnostics;
        let fx = self.values(x)?;
        let kappa = self.model().kappa;
        let level = self.level();
        Ok(match (kappa > 0.0, level > 0.0) {
            (true, true) => LaplaceOutcome {
                jump: RuinResult::new(fx[0], ResultKind::LaplaceJump, d),
                continuous: None,
            },
            (true, false) => {
                let (jump, cont) = self.two_by_two(&fx)?;
                LaplaceOutcome {
                    jump: RuinResult::new(jump, ResultKind::LaplaceJump, d),
                    continuous: Some(RuinResult::new(cont, ResultKind::SplitCont, d)),
                }
            }
            (false, false) => LaplaceOutcome {
                jump: RuinResult::new(fx[0], ResultKind::LaplaceJump, d),
                continuous: Some(RuinResult::exact(0.0, ResultKind::SplitCont, d)),
            },
            (false, true) => {
                let cont = self.recurrent_cont(fx[0])?;
                LaplaceOutcome {
                    jump: RuinResult::new(
                        Complex64::new(1.0, 0.0) - cont,
                        ResultKind::LaplaceJump,
                        d,
                    ),
                    continuous: Some(RuinResult::new(cont, ResultKind::SplitCont, d)),
                }
            }
        })
    }

    /// `P(tau < infinity)` from the `zeta = 0` eigenfunctions.
    pub fn ruin(&self, x: f64) -> Result<RuinResult, RuinError> {
        if self.zeta != 0.0 {
            return Err(RuinError::BadQuery(
                "ruin probabilities need zeta = 0".into(),
            ));
        }
        let d = self.diagnostics;
        if self.model().kappa < 0.0 {
            self.check_start(x)?;
            return Ok(RuinResult::exact(1.0, ResultKind::RuinProb, d));
        }
        let out = self.laplace(x)?;
        let total = Complex64::new(out.jump.value, out.jump.imag_residual)
            + out
                .continuous
                .map(|c| Complex64::new(c.value, c.imag_residual))
                .unwrap_or_default();
        let mut r = RuinResult::new(total, ResultKind::RuinProb, d);
        r.imag_residual = out.jump.imag_residual + out.continuous.map_or(0.0, |c| c.imag_residual);
        Ok(r)
    }
}

/// `E^x[e^{-zeta Z}; A_j]`, and `P^x(A_c)` where a continuous crossing is possible.
///
/// For negative drift and a negative level the jump event has probability one and the
/// result is `E^x[e^{-zeta Z}]`.
pub fn laplace_undershoot(
    model: &OuModel,
    q: Query,
    opts: &SolverOptions,
) -> Result<LaplaceOutcome, RuinError> {
    q.check()?;
    FirstPassage::new(model, q.level, q.zeta, opts)?.laplace(q.x)
}

/// `P^x(tau < infinity)`; identically one under negative drift.
pub fn ruin_probability(
    model: &OuModel,
    x: f64,
    level: f64,
    opts: &SolverOptions,
) -> Result<RuinResult, RuinError> {
    Query::new(x, level, 0.0)?;
    if model.kappa < 0.0 {
        let d = Diagnostics {
            layout: Layout::for_level(model, level)?,
            condition: 1.0,
            residual: 0.0,
            quadrature_error: 0.0,
        };
        return Ok(RuinResult::exact(1.0, ResultKind::RuinProb, d));
    }
    FirstPassage::new(model, level, 0.0, opts)?.ruin(x)
}

/// `(P^x(A_c), P^x(A_j))` under negative drift, where the level is hit almost surely.
pub fn recurrent_split(
    model: &OuModel,
    x: f64,
    level: f64,
    opts: &SolverOptions,
) -> Result<(RuinResult, RuinResult), RuinError> {
    Query::new(x, level, 0.0)?;
    if model.kappa > 0.0 {
        return Err(RuinError::UnsupportedScenario(
            "the recurrent split needs negative drift".into(),
        ));
    }
    if level < 0.0 {
        let d = Diagnostics {
            layout: Layout::Finite,
            condition: 1.0,
            residual: 0.0,
            quadrature_error: 0.0,
        };
        return Ok((
            RuinResult::exact(0.0, ResultKind::SplitCont, d),
            RuinResult::exact(1.0, ResultKind::SplitJump, d),
        ));
    }
    let fp = FirstPassage::new(model, level, 0.0, opts)?;
    let fx = fp.values(x)?[0];
    let cont = fp.recurrent_cont(fx)?;
    let d = fp.diagnostics;
    let mut jump = RuinResult::new(-cont, ResultKind::SplitJump, d);
    // Summing to one exactly.
    jump.value = 1.0 - cont.re;
    Ok((RuinResult::new(cont, ResultKind::SplitCont, d), jump))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    XtoInf,
    LtoMinusInf,
    UndershootLimit,
}

/// Normalising function `e^{rate t} t^{power}`, with `t = x` or `t = -level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub rate: f64,
    pub power: f64,
}

impl Normalizer {
    pub fn eval(&self, t: f64) -> f64 {
        (self.rate * t).exp() * t.powf(self.power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticResult {
    pub regime: Regime,
    pub constant: Complex64,
    /// Limit coefficients, where the result has several.
    pub coefficients: Vec<Complex64>,
    pub normalizer: Option<Normalizer>,
    /// Named intermediate quantities: reference integrals, kernel values, determinants.
    pub ingredients: Vec<(String, Complex64)>,
}

fn require_positive_drift(model: &OuModel) -> Result<(), RuinError> {
    if model.kappa <= 0.0 {
        return Err(RuinError::UnsupportedScenario(
            "needs positive drift".into(),
        ));
    }
    Ok(())
}

/// `int z^power e^{-rate z} dz` over a reference contour.
pub fn reference_integral(
    kind: ReferenceKind,
    power: f64,
    a: f64,
    rate: f64,
    opts: &SolverOptions,
) -> Result<Complex64, RuinError> {
    let v = integrate_kernel(
        &Kernel::power(power),
        &build_reference(kind, a),
        &Weight::exp(rate),
        &opts.quad,
    )?;
    Ok(v.to_complex())
}

/// Tail constant `K` in `P^x(tau < infinity) ~ K e^{-mu_1 x} x^{-rho_1 - 1}` as `x -> infinity`,
/// where `rho_1` is the kernel exponent at `mu_1`. `a` is the offset of the scaled
/// reference wedge; the result does not depend on it.
pub fn asymptotic_k(
    model: &OuModel,
    level: f64,
    a: f64,
    opts: &SolverOptions,
) -> Result<AsymptoticResult, RuinError> {
    require_positive_drift(model)?;
    let fp = FirstPassage::new(model, level, 0.0, opts)?;
    asymptotic_k_from(&fp, a)
}

/// As [`asymptotic_k`], reusing solved `zeta = 0` eigenfunctions.
pub fn asymptotic_k_from(fp: &FirstPassage, a: f64) -> Result<AsymptoticResult, RuinError> {
    let model = fp.model();
    require_positive_drift(model)?;
    if fp.zeta != 0.0 {
        return Err(RuinError::BadQuery(
            "the tail constant needs zeta = 0".into(),
        ));
    }
    let mu1 = model.mus()[0];
    let rho = model.mu_exponent(0);
    let psi_rest = psi_excluding_principal(model, mu1, Complex64::new(mu1, 0.0))?;
    let wedge = reference_integral(
        ReferenceKind::GammaMinusA,
        rho,
        a,
        1.0,
        &fp.prepared.options,
    )?;
    let scale = psi_rest * wedge;
    let c1: Vec<Complex64> = fp
        .functions
        .iter()
        .map(|f| f.upper[0].coefficient.to_complex())
        .collect();
    let mut ingredients = vec![
        ("psi without mu_1 at mu_1".to_string(), psi_rest),
        ("reference wedge integral".to_string(), wedge),
    ];
    let combo = if fp.functions.len() == 1 {
        ingredients.push(("c_1".into(), c1[0]));
        c1[0]
    } else {
        let (f1, f2) = (fp.at_level[0], fp.at_level[1]);
        let den = f1 - f2;
        if den.norm() <= 1e-12 {
            return Err(RuinError::DegenerateDenominator {
                what: "f_1(level) - f_2(level)".into(),
                value: den.norm(),
            });
        }
        ingredients.push(("c_1 of f_1".into(), c1[0]));
        ingredients.push(("c_1 of f_2".into(), c1[1]));
        ingredients.push(("f_1(level)".into(), f1));
        ingredients.push(("f_2(level)".into(), f2));
        (c1[0] * (1.0 - f2) + c1[1] * (f1 - 1.0)) / den
    };
    Ok(AsymptoticResult {
        regime: Regime::XtoInf,
        constant: scale * combo,
        coefficients: c1,
        normalizer: Some(Normalizer {
            rate: -mu1,
            power: -rho - 1.0,
        }),
        ingredients,
    })
}

/// Scaling limit of a single positive-side contour integral as `x -> infinity`:
/// `int_{Gamma_j} psi(z) e^{-x z} dz ~ e^{-mu_j x} x^{-rho_j - 1} L_j`.
pub fn positive_contour_limit(
    model: &OuModel,
    j: usize,
    a: f64,
    opts: &SolverOptions,
) -> Result<AsymptoticResult, RuinError> {
    require_positive_drift(model)?;
    let mu = model.mus()[j];
    let rho = model.mu_exponent(j);
    let kind = if rho > 0.0 {
        ReferenceKind::Gamma0
    } else {
        ReferenceKind::GammaMinusA
    };
    let psi_rest = psi_excluding_principal(model, mu, Complex64::new(mu, 0.0))?;
    let reference = reference_integral(kind, rho, a, 1.0, opts)?;
    Ok(AsymptoticResult {
        regime: Regime::XtoInf,
        constant: psi_rest * reference,
        coefficients: Vec::new(),
        normalizer: Some(Normalizer {
            rate: -mu,
            power: -rho - 1.0,
        }),
        ingredients: vec![
            (
                format!("psi without mu_{} at mu_{}", j + 1, j + 1),
                psi_rest,
            ),
            (format!("{kind:?} integral"), reference),
        ],
    })
}

/// Value of the `j`-th positive-side contour integral at `x`.
pub fn positive_contour_value(
    model: &OuModel,
    j: usize,
    x: f64,
    opts: &SolverOptions,
) -> Result<Complex64, RuinError> {
    let g = opts.place(&build_gamma_positive(model, j)?, x);
    Ok(integrate(model, &g, &Weight::exp(x), &opts.quad)?.to_complex())
}

/// The point `p_i` of the level-side family: `-nu_{-i}` for `i < 0`, `0`, `mu_i` for `i > 0`.
fn level_point(model: &OuModel, i: i64) -> Result<(f64, f64, PointKind), RuinError> {
    let pts = model.classify_points();
    let idx = i + model.s() as i64;
    if idx < 0 || idx >= pts.len() as i64 {
        return Err(ContourError::BadIndex {
            what: "level point".into(),
            index: i,
        }
        .into());
    }
    let p = pts[idx as usize];
    Ok((p.location, p.exponent, p.kind))
}

/// Limit of `int_{Gamma_i} psi(z) e^{-l z} / (z - mu_k) dz` over the level-side contour `i`
/// as `l -> -infinity`, after division by the returned normaliser in `-l`.
///
/// `k` is one based as is `i` for the downward points.
pub fn asymptotic_n3(
    model: &OuModel,
    i: i64,
    k: usize,
    a: f64,
    opts: &SolverOptions,
) -> Result<AsymptoticResult, RuinError> {
    require_positive_drift(model)?;
    if k == 0 || k > model.r() {
        return Err(ContourError::BadIndex {
            what: "downward rate".into(),
            index: k as i64,
        }
        .into());
    }
    let mu_k = model.mus()[k - 1];
    let (b, e, kind) = level_point(model, i)?;
    let same = i > 0 && i as usize == k;
    // Merging the pole into the branch point lowers the exponent by one.
    let power = if same { e - 1.0 } else { e };
    let reference_kind = if kind == PointKind::Zero {
        ReferenceKind::GammaTildeRay
    } else {
        ReferenceKind::GammaTildeA
    };
    let psi_rest = psi_excluding_principal(model, b, Complex64::new(b, 0.0))?;
    let reference = reference_integral(reference_kind, power, a, -1.0, opts)?;
    let factor = if same {
        Complex64::new(1.0, 0.0)
    } else {
        Complex64::new(1.0 / (b - mu_k), 0.0)
    };
    Ok(AsymptoticResult {
        regime: Regime::LtoMinusInf,
        constant: psi_rest * factor * reference,
        coefficients: Vec::new(),
        normalizer: Some(Normalizer {
            rate: b,
            power: -power - 1.0,
        }),
        ingredients: vec![
            (format!("psi without {b} at {b}"), psi_rest),
            (
                format!("{reference_kind:?} integral of z^{power}"),
                reference,
            ),
        ],
    })
}

/// Direct value of the level moment `int_{Gamma_i} psi(z) e^{-l z} / (z - mu_k) dz`.
pub fn level_moment(
    model: &OuModel,
    i: i64,
    k: usize,
    level: f64,
    opts: &SolverOptions,
) -> Result<KernelValue, RuinError> {
    let mu_k = model.mus()[k - 1];
    let g = opts.place(&build_gamma_level(model, i)?, level);
    Ok(integrate(model, &g, &Weight::exp_pole(level, mu_k), &opts.quad)?.value)
}

/// Limit of `P^x(tau(l) < infinity)` as `l -> -infinity`, for positive drift.
///
/// The limit is `-sum_i c_i F_i(x)` where `F_i` are the positive-side contour integrals
/// and the coefficients `c_i` are returned in `coefficients`.
#[derive(Debug, Clone)]
pub struct LevelLimit {
    pub model: OuModel,
    pub options: SolverOptions,
    pub coefficients: Vec<Complex64>,
    pub ingredients: Vec<(String, Complex64)>,
}

impl LevelLimit {
    pub fn new(model: &OuModel, opts: &SolverOptions) -> Result<LevelLimit, RuinError> {
        require_positive_drift(model)?;
        let (r, s) = (model.r(), model.s());
        let set = ContourSet::build(model, Layout::TwoRegion, -1.0, opts)?;
        let m = compute_moments(model, &set, -1.0, Layout::TwoRegion, opts)?;
        let n = r + s;
        // Columns: positive contours, then level contours -s..-1.
        let mut matrix = vec![Vec::with_capacity(n); n];
        let mut zero_col = Vec::with_capacity(n);
        for k in 0..r {
            for i in 0..r {
                matrix[k].push(m.m1[i][k]);
            }
            for j in 0..s {
                matrix[k].push(m.n1[j][k]);
            }
            zero_col.push(m.n1[s][k]);
        }
        for d in 0..s {
            for i in 0..r {
                matrix[r + d].push(-m.m2[i][d]);
            }
            for j in 0..s {
                matrix[r + d].push(m.n2[j][d]);
            }
            zero_col.push(m.n2[s][d]);
        }
        let psi0 = psi_excluding_principal(model, 0.0, Complex64::new(0.0, 0.0))?;
        let hankel = reference_integral(ReferenceKind::GammaTildeA, -1.0, 1.0, -1.0, opts)?;
        let base = psi0 * hankel;
        let to_kv = |rows: &Vec<Vec<Complex64>>| -> Vec<Vec<KernelValue>> {
            rows.iter()
                .map(|row| row.iter().map(|v| KernelValue::from_complex(*v)).collect())
                .collect()
        };
        let sys = LinearSystem {
            label: "level limit".into(),
            matrix: to_kv(&matrix),
            rhs: zero_col.iter().map(|v| v / base).collect(),
            row_labels: (1..=r)
                .map(|k| format!("downward mu_{k}"))
                .chain((1..=s).map(|d| format!("upward nu_{d}")))
                .collect(),
            col_labels: (1..=r)
                .map(|i| format!("c_{i}"))
                .chain((1..=s).map(|j| format!("b_-{j}")))
                .collect(),
        };
        let det = sys.determinant()?.to_complex();
        let sol = solve(&sys, opts.condition_limit).map_err(|e| match e {
            EigenError::SingularSystem(_) | EigenError::IllConditioned { .. } => {
                RuinError::Eigen(EigenError::SingularSystem("level-limit matrix".into()))
            }
            e => e.into(),
        })?;
        let mut ingredients = vec![
            ("psi without 0 at 0".to_string(), psi0),
            ("Hankel integral of 1/z".to_string(), hankel),
            ("det M".to_string(), det),
        ];
        // Cramer form: the i-th column removed and the zero contour column appended.
        for i in 0..r {
            let minor: Vec<Vec<KernelValue>> = matrix
                .iter()
                .zip(&zero_col)
                .map(|(row, z)| {
                    row.iter()
                        .enumerate()
                        .filter(|(c, _)| *c != i)
                        .map(|(_, v)| KernelValue::from_complex(*v))
                        .chain(std::iter::once(KernelValue::from_complex(*z)))
                        .collect()
                })
                .collect();
            let mi = LinearSystem {
                matrix: minor,
                ..sys.clone()
            };
            let di = mi.determinant()?.to_complex();
            ingredients.push((format!("det M_{} / det M", i + 1), di / det));
        }
        let coefficients = sol.coefficients[..r]
            .iter()
            .map(|c| c.to_complex())
            .collect();
        Ok(LevelLimit {
            model: model.clone(),
            options: *opts,
            coefficients,
            ingredients,
        })
    }

    /// `-sum_i c_i F_i(x)`.
    pub fn eval(&self, x: f64) -> Result<Complex64, RuinError> {
        if x <= 0.0 {
            return Err(RuinError::BadQuery(format!("start {x} must be positive")));
        }
        let mut sum = Complex64::new(0.0, 0.0);
        for (i, c) in self.coefficients.iter().enumerate() {
            sum -= c * positive_contour_value(&self.model, i, x, &self.options)?;
        }
        Ok(sum)
    }

    pub fn result(&self, x: f64) -> Result<AsymptoticResult, RuinError> {
        let v = self.eval(x)?;
        let mut ingredients = self.ingredients.clone();
        ingredients.push(("limit at x".into(), v));
        Ok(AsymptoticResult {
            regime: Regime::LtoMinusInf,
            constant: v,
            coefficients: self.coefficients.clone(),
            normalizer: None,
            ingredients,
        })
    }
}

/// `lim_{l -> -infinity} P^x(tau(l) < infinity)`.
pub fn limit_ruin_level(
    model: &OuModel,
    x: f64,
    opts: &SolverOptions,
) -> Result<AsymptoticResult, RuinError> {
    LevelLimit::new(model, opts)?.result(x)
}

/// Finite-level quantities that converge as the level decreases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: f64,
    /// Product of the zero contour coefficient and its integral at the level, sign
    /// matched to the limit coefficients; tends to `-1`.
    pub zero_term: Complex64,
    /// Positive-side coefficients of the first eigenfunction, sign matched to
    /// [`LevelLimit::coefficients`].
    pub coefficients: Vec<Complex64>,
}

pub fn level_trace(
    model: &OuModel,
    level: f64,
    opts: &SolverOptions,
) -> Result<LevelTrace, RuinError> {
    require_positive_drift(model)?;
    if level >= 0.0 {
        return Err(RuinError::BadQuery("needs a negative level".into()));
    }
    let prepared = PreparedLevel::new(model, level, opts)?;
    let (r, s) = (model.r(), model.s());
    let sol = solve(&prepared.systems[0], opts.condition_limit)?;
    let b0 = sol.coefficients[r + s];
    let g0 = opts.place(&prepared.contours.level[s], level);
    let f0 = integrate(model, &g0, &Weight::exp(level), &opts.quad)?.value;
    Ok(LevelTrace {
        level,
        zero_term: -b0.mul(&f0).to_complex(),
        coefficients: sol.coefficients[..r]
            .iter()
            .map(|c| -c.to_complex())
            .collect(),
    })
}

/// `lim_{l -> -infinity} E^x[e^{-zeta Z}] = mu_1 / (mu_1 + zeta)` under negative drift.
pub fn undershoot_limit(model: &OuModel, zeta: f64) -> Result<AsymptoticResult, RuinError> {
    if model.kappa >= 0.0 {
        return Err(RuinError::UnsupportedScenario(
            "needs negative drift".into(),
        ));
    }
    if !(zeta >= 0.0 && zeta.is_finite()) {
        return Err(RuinError::BadQuery(format!("Laplace argument {zeta}")));
    }
    let mu1 = model.mus()[0];
    Ok(AsymptoticResult {
        regime: Regime::UndershootLimit,
        constant: Complex64::new(mu1 / (mu1 + zeta), 0.0),
        coefficients: Vec::new(),
        normalizer: None,
        ingredients: vec![("mu_1".into(), Complex64::new(mu1, 0.0))],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_model, validate_model, ModelParams};

    fn one_rate_negative_drift() -> OuModel {
        validate_model(&ModelParams {
            kappa: -1.0,
            lambda: 1.0,
            p: 0.6,
            alphas: vec![1.0],
            mus: vec![1.5],
            betas: vec![1.0],
            nus: vec![2.0],
        })
        .unwrap()
    }

    #[test]
    fn queries_are_checked() {
        assert!(Query::new(1.0, -1.0, 0.5).is_ok());
        assert!(Query::new(-1.0, -1.0, 0.0).is_err());
        assert!(Query::new(1.0, 0.0, 0.0).is_err());
        assert!(Query::new(1.0, -1.0, -0.1).is_err());
        assert!(Query::new(f64::NAN, -1.0, 0.0).is_err());
    }

    #[test]
    fn parts_add_up_to_the_ruin_probability() {
        let m = reference_model();
        let opts = SolverOptions::default();
        let fp = FirstPassage::new(&m, -1.0, 0.0, &opts).unwrap();
        for x in [0.2, 1.0, 3.0] {
            let out = fp.laplace(x).unwrap();
            let total = fp.ruin(x).unwrap();
            let parts = out.jump.value + out.continuous.unwrap().value;
            assert!((parts - total.value).abs() < 1e-14);
            assert!(total.within_invariants(1e-8));
        }
        assert!(matches!(fp.ruin(-2.0), Err(RuinError::BadQuery(_))));
        let fz = FirstPassage::new(&m, -1.0, 1.0, &opts).unwrap();
        assert!(matches!(fz.ruin(1.0), Err(RuinError::BadQuery(_))));
    }

    #[test]
    fn positive_level_has_no_creeping() {
        let m = reference_model();
        let out = laplace_undershoot(
            &m,
            Query::new(2.0, 0.5, 0.0).unwrap(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(out.continuous.is_none());
        assert!(out.jump.value > 0.0 && out.jump.value < 1.0);
    }

    #[test]
    fn negative_drift_undershoot_is_exponential() {
        let m = one_rate_negative_drift();
        let opts = SolverOptions::default();
        assert_eq!(ruin_probability(&m, 3.0, -1.0, &opts).unwrap().value, 1.0);
        for zeta in [0.0, 0.7, 3.0] {
            let q = Query::new(0.5, -1.0, zeta).unwrap();
            let v = laplace_undershoot(&m, q, &opts).unwrap().jump.value;
            assert!((v - 1.5 / (1.5 + zeta)).abs() < 1e-12);
        }
        let lim = undershoot_limit(&m, 0.7).unwrap().constant.re;
        assert!((lim - 1.5 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn recurrent_split_sums_to_one() {
        let m = one_rate_negative_drift();
        let opts = SolverOptions::default();
        let (c, j) = recurrent_split(&m, 2.0, 1.0, &opts).unwrap();
        assert!(c.value > 0.0 && c.value < 1.0);
        assert_eq!(c.value + j.value, 1.0);
        let (c, j) = recurrent_split(&m, 0.2, -1.0, &opts).unwrap();
        assert_eq!((c.value, j.value), (0.0, 1.0));
        assert!(matches!(
            recurrent_split(&reference_model(), 1.0, -1.0, &opts),
            Err(RuinError::UnsupportedScenario(_))
        ));
        assert!(matches!(
            FirstPassage::new(&m, 1.0, 0.5, &opts),
            Err(RuinError::UnsupportedScenario(_))
        ));
    }
}
