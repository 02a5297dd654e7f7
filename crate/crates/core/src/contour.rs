//! Integration contours and kernel-weighted contour integrals.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{BranchTracker, Kernel, KernelError, KernelValue};
use crate::model::{OuModel, PointKind};
use crate::quadrature::{grading_power, integrate_unit, node, UnitResult, UnitRule, T_MAX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContourError {
    #[error("quadrature did not converge on {label} ({weight}): error {error:.3e} for value {value:.3e}")]
    NoConvergence {
        label: String,
        weight: String,
        error: f64,
        value: f64,
    },
    #[error("integrand does not decay along {label} ({weight})")]
    DivergentTail { label: String, weight: String },
    #[error("index {index} out of range for {what}")]
    BadIndex { what: String, index: i64 },
    #[error("contour recipe {0} does not apply to this scenario")]
    BadScenario(String),
    #[error("vertex {vertex} outside the allowed interval ({lo}, {hi})")]
    BadVertex { vertex: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// A directed piece of a contour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Piece {
    /// `start -> end`, parametrised by the fraction `t in [0, 1]`.
    Segment { start: Complex64, end: Complex64 },
    /// `{origin + dir t : t >= 0}`; traversed towards `origin` when `inward`.
    Ray {
        origin: Complex64,
        dir: Complex64,
        inward: bool,
    },
}

impl Piece {
    /// Point at parameter `t`.
    pub fn point(&self, t: f64) -> Complex64 {
        match *self {
            Piece::Segment { start, end } => start + (end - start) * t,
            Piece::Ray { origin, dir, .. } => origin + dir * t,
        }
    }

    /// `point(t) - b`.
    pub fn offset(&self, t: f64, b: f64) -> Complex64 {
        match *self {
            Piece::Segment { start, end } => {
                if t <= 0.5 {
                    (start - b) + (end - start) * t
                } else {
                    (end - b) - (end - start) * (1.0 - t)
                }
            }
            Piece::Ray { origin, dir, .. } => (origin - b) + dir * t,
        }
    }

    /// Finite point where the traversal of this piece ends.
    pub fn traversal_end(&self) -> Option<Complex64> {
        match *self {
            Piece::Segment { end, .. } => Some(end),
            Piece::Ray { origin, inward, .. } => inward.then_some(origin),
        }
    }

    pub fn traversal_start(&self) -> Option<Complex64> {
        match *self {
            Piece::Segment { start, .. } => Some(start),
            Piece::Ray { origin, inward, .. } => (!inward).then_some(origin),
        }
    }

    /// Interior point used to carry branch arguments.
    pub fn reference_point(&self) -> Complex64 {
        match *self {
            Piece::Segment { start, end } => 0.5 * (start + end),
            Piece::Ray { origin, dir, .. } => origin + dir,
        }
    }

    fn reversed(&self) -> Piece {
        match *self {
            Piece::Segment { start, end } => Piece::Segment {
                start: end,
                end: start,
            },
            Piece::Ray {
                origin,
                dir,
                inward,
            } => Piece::Ray {
                origin,
                dir,
                inward: !inward,
            },
        }
    }
}

/// The fixed contours appearing in scaling limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceKind {
    /// `{(1+i)t : t >= 0}`.
    Gamma0,
    /// Wedge through `-a` opening to the right.
    GammaMinusA,
    /// Wedge through `a` opening to the right.
    GammaA,
    /// `{(-1+i)t : t >= 0}`.
    GammaTildeRay,
    /// Wedge through `a` opening to the left, upper arm last.
    GammaTildeA,
    /// `{(-1-i)t : t >= 0}`.
    MinusGamma,
    /// Wedge through `a` opening to the left, lower arm last.
    MinusGammaA,
}

/// How a contour was built; wedges remember their admissible vertex interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Ray leaving a zero of the kernel to the upper right.
    RightRay {
        origin: f64,
    },
    /// Wedge opening right around a singular point; vertex in `(lo, hi)`, `hi` the enclosed point.
    RightWedge {
        vertex: f64,
        lo: f64,
        hi: f64,
    },
    /// Ray leaving a zero of the kernel to the upper left.
    LeftRay {
        origin: f64,
    },
    /// Wedge opening left around a singular point `lo`; vertex in `(lo, hi)`.
    LeftWedge {
        vertex: f64,
        lo: f64,
        hi: f64,
    },
    /// Down-and-back path between two zeros.
    FiniteV,
    /// Closed four-segment path around a singular point.
    Diamond {
        right: f64,
    },
    Reference {
        kind: ReferenceKind,
        a: f64,
    },
    Custom,
}

/// An ordered chain of pieces with a branch anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub pieces: Vec<Piece>,
    /// Piece whose reference point carries principal arguments.
    pub anchor: usize,
    pub label: String,
    pub shape: Shape,
}

fn right_wedge(vertex: f64) -> Vec<Piece> {
    vec![
        Piece::Ray {
            origin: c(vertex, 0.0),
            dir: c(1.0, -1.0),
            inward: true,
        },
        Piece::Ray {
            origin: c(vertex, 0.0),
            dir: c(1.0, 1.0),
            inward: false,
        },
    ]
}

fn left_wedge(vertex: f64) -> Vec<Piece> {
    vec![
        Piece::Ray {
            origin: c(vertex, 0.0),
            dir: c(-1.0, -1.0),
            inward: true,
        },
        Piece::Ray {
            origin: c(vertex, 0.0),
            dir: c(-1.0, 1.0),
            inward: false,
        },
    ]
}

impl Contour {
    pub fn from_pieces(pieces: Vec<Piece>, anchor: usize, label: &str) -> Contour {
        Contour {
            pieces,
            anchor,
            label: label.to_string(),
            shape: Shape::Custom,
        }
    }

    /// The same path traversed backwards.
    pub fn reversed(&self) -> Contour {
        let n = self.pieces.len();
        Contour {
            pieces: self.pieces.iter().rev().map(|p| p.reversed()).collect(),
            anchor: n - 1 - self.anchor,
            label: format!("{} reversed", self.label),
            shape: Shape::Custom,
        }
    }

    /// Move the vertex of a wedge within its admissible interval.
    pub fn with_vertex(&self, vertex: f64) -> Result<Contour, ContourError> {
        match self.shape {
            Shape::RightWedge { lo, hi, .. } => {
                if !(vertex > lo && vertex < hi) {
                    return Err(ContourError::BadVertex { vertex, lo, hi });
                }
                Ok(Contour {
                    pieces: right_wedge(vertex),
                    anchor: 1,
                    label: self.label.clone(),
                    shape: Shape::RightWedge { vertex, lo, hi },
                })
            }
            Shape::LeftWedge { lo, hi, .. } => {
                if !(vertex > lo && vertex < hi) {
                    return Err(ContourError::BadVertex { vertex, lo, hi });
                }
                Ok(Contour {
                    pieces: left_wedge(vertex),
                    anchor: 1,
                    label: self.label.clone(),
                    shape: Shape::LeftWedge { vertex, lo, hi },
                })
            }
            _ => Ok(self.clone()),
        }
    }

    /// Relocate a wedge vertex towards the enclosed point so that the weight `e^{-rate z}`
    /// varies by at most a factor `e` between the vertex and that point.
    pub fn adapted(&self, rate: f64) -> Contour {
        match self.shape {
            Shape::RightWedge { vertex, lo, hi } if rate > 0.0 => {
                let gap = hi - lo;
                let v = hi - (0.5 * gap).min(1.0 / rate);
                if v > vertex {
                    return self.with_vertex(v).unwrap_or_else(|_| self.clone());
                }
                self.clone()
            }
            Shape::LeftWedge { vertex, lo, hi } if rate < 0.0 => {
                let gap = if hi.is_finite() { hi - lo } else { 2.0 };
                let v = lo + (0.5 * gap).min(-1.0 / rate);
                if v < vertex {
                    return self.with_vertex(v).unwrap_or_else(|_| self.clone());
                }
                self.clone()
            }
            _ => self.clone(),
        }
    }

    /// Finite vertices (segment endpoints and ray origins).
    pub fn vertices(&self) -> Vec<Complex64> {
        let mut out = Vec::new();
        for p in &self.pieces {
            match *p {
                Piece::Segment { start, end } => {
                    out.push(start);
                    out.push(end);
                }
                Piece::Ray { origin, .. } => out.push(origin),
            }
        }
        out
    }

    /// Rightmost finite point.
    pub fn max_re(&self) -> f64 {
        self.vertices()
            .iter()
            .map(|v| v.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Leftmost finite point.
    pub fn min_re(&self) -> f64 {
        self.vertices()
            .iter()
            .map(|v| v.re)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Contour for the `i`-th downward point (zero based) opening into the right half-plane.
pub fn build_gamma_positive(model: &OuModel, i: usize) -> Result<Contour, ContourError> {
    if i >= model.r() {
        return Err(ContourError::BadIndex {
            what: "downward point".into(),
            index: i as i64,
        });
    }
    let mu = model.mus()[i];
    let label = format!("positive contour {}", i + 1);
    if model.mu_exponent(i) > 0.0 {
        return Ok(Contour {
            pieces: vec![Piece::Ray {
                origin: c(mu, 0.0),
                dir: c(1.0, 1.0),
                inward: false,
            }],
            anchor: 0,
            label,
            shape: Shape::RightRay { origin: mu },
        });
    }
    // A zero with a fractional exponent is a branch point too, so the vertex stays
    // between the adjacent points.
    let lo = if i == 0 { 0.0 } else { model.mus()[i - 1] };
    let vertex = 0.5 * (lo + mu);
    Ok(Contour {
        pieces: right_wedge(vertex),
        anchor: 1,
        label,
        shape: Shape::RightWedge { vertex, lo, hi: mu },
    })
}

/// Contour for level point `p_j`, `j in -s..=r` with `p_0 = 0`, opening into the left half-plane.
pub fn build_gamma_level(model: &OuModel, j: i64) -> Result<Contour, ContourError> {
    let pts = model.classify_points();
    let s = model.s() as i64;
    let idx = j + s;
    if idx < 0 || idx >= pts.len() as i64 {
        return Err(ContourError::BadIndex {
            what: "level point".into(),
            index: j,
        });
    }
    let idx = idx as usize;
    let pj = pts[idx].location;
    let label = format!("level contour {j}");
    if pts[idx].kind == PointKind::Zero {
        return Ok(Contour {
            pieces: vec![Piece::Ray {
                origin: c(pj, 0.0),
                dir: c(-1.0, 1.0),
                inward: false,
            }],
            anchor: 0,
            label,
            shape: Shape::LeftRay { origin: pj },
        });
    }
    let (hi, vertex) = match pts.get(idx + 1) {
        Some(next) => (next.location, 0.5 * (pj + next.location)),
        None => (f64::INFINITY, pj + 1.0),
    };
    Ok(Contour {
        pieces: left_wedge(vertex),
        anchor: 1,
        label,
        shape: Shape::LeftWedge { vertex, lo: pj, hi },
    })
}

/// Finite contour for the `i`-th downward point (zero based, `i >= 1`) under negative drift.
///
/// `a` sets the right vertex of the diamond at `mu_i + a / (-level)`, kept below the
/// midpoint to the next point.
pub fn build_gamma_finite(
    model: &OuModel,
    i: usize,
    level: f64,
    a: f64,
) -> Result<Contour, ContourError> {
    if model.kappa >= 0.0 || level >= 0.0 {
        return Err(ContourError::BadScenario("finite contour".into()));
    }
    if i == 0 || i >= model.r() {
        return Err(ContourError::BadIndex {
            what: "finite contour".into(),
            index: i as i64,
        });
    }
    let mus = model.mus();
    let (m1, mi) = (mus[0], mus[i]);
    let label = format!("finite contour {}", i + 1);
    if model.mu_exponent(i) > 0.0 {
        let w = mi - m1;
        let apex = c(mi - 0.5 * w, -0.5 * w);
        return Ok(Contour {
            pieces: vec![
                Piece::Segment {
                    start: c(mi, 0.0),
                    end: apex,
                },
                Piece::Segment {
                    start: apex,
                    end: c(m1, 0.0),
                },
            ],
            anchor: 0,
            label,
            shape: Shape::FiniteV,
        });
    }
    let mut off = a / (-level);
    if i + 1 < model.r() {
        off = off.min(0.5 * (mus[i + 1] - mi));
    }
    let right = mi + off;
    let w = right - m1;
    let top = c(m1 + 0.5 * w, 0.5 * w);
    let bottom = c(m1 + 0.5 * w, -0.5 * w);
    Ok(Contour {
        pieces: vec![
            Piece::Segment {
                start: c(m1, 0.0),
                end: top,
            },
            Piece::Segment {
                start: top,
                end: c(right, 0.0),
            },
            Piece::Segment {
                start: c(right, 0.0),
                end: bottom,
            },
            Piece::Segment {
                start: bottom,
                end: c(m1, 0.0),
            },
        ],
        anchor: 1,
        label,
        shape: Shape::Diamond { right },
    })
}

/// One of the fixed reference contours; `a` is ignored for the single rays.
pub fn build_reference(kind: ReferenceKind, a: f64) -> Contour {
    let (pieces, anchor) = match kind {
        ReferenceKind::Gamma0 => (
            vec![Piece::Ray {
                origin: c(0.0, 0.0),
                dir: c(1.0, 1.0),
                inward: false,
            }],
            0,
        ),
        ReferenceKind::GammaMinusA => (right_wedge(-a), 1),
        ReferenceKind::GammaA => (right_wedge(a), 1),
        ReferenceKind::GammaTildeRay => (
            vec![Piece::Ray {
                origin: c(0.0, 0.0),
                dir: c(-1.0, 1.0),
                inward: false,
            }],
            0,
        ),
        ReferenceKind::GammaTildeA => (left_wedge(a), 1),
        ReferenceKind::MinusGamma => (
            vec![Piece::Ray {
                origin: c(0.0, 0.0),
                dir: c(-1.0, -1.0),
                inward: false,
            }],
            0,
        ),
        ReferenceKind::MinusGammaA => (
            vec![
                Piece::Ray {
                    origin: c(a, 0.0),
                    dir: c(-1.0, 1.0),
                    inward: true,
                },
                Piece::Ray {
                    origin: c(a, 0.0),
                    dir: c(-1.0, -1.0),
                    inward: false,
                },
            ],
            0,
        ),
    };
    Contour {
        pieces,
        anchor,
        label: format!("{kind:?}"),
        shape: Shape::Reference { kind, a },
    }
}

/// Quadrature settings for contour integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Length scale of the ray map `t = T s / (1 - s)`; chosen per ray when absent.
    pub tail_map: Option<f64>,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_subdivisions: 64,
            tail_map: None,
        }
    }
}

impl QuadratureConfig {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        QuadratureConfig {
            rel_tol,
            ..Default::default()
        }
    }

    fn unit_rule(&self) -> UnitRule {
        UnitRule {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_subdivisions: self.max_subdivisions,
            ..Default::default()
        }
    }
}

/// Weight `e^{-rate z} / (z - pole)` multiplying the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub rate: f64,
    pub pole: Option<f64>,
}

impl Weight {
    pub fn one() -> Self {
        Weight {
            rate: 0.0,
            pole: None,
        }
    }

    /// `e^{-y z}`.
    pub fn exp(y: f64) -> Self {
        Weight {
            rate: y,
            pole: None,
        }
    }

    /// `1 / (z - c)`.
    pub fn pole(c: f64) -> Self {
        Weight {
            rate: 0.0,
            pole: Some(c),
        }
    }

    /// `e^{-y z} / (z - c)`.
    pub fn exp_pole(y: f64, c: f64) -> Self {
        Weight {
            rate: y,
            pole: Some(c),
        }
    }

    fn describe(&self) -> String {
        match self.pole {
            Some(p) if self.rate != 0.0 => format!("exp(-{} z)/(z - {})", self.rate, p),
            Some(p) => format!("1/(z - {p})"),
            None if self.rate != 0.0 => format!("exp(-{} z)", self.rate),
            None => "1".into(),
        }
    }
}

/// Result of a contour integral: `value.to_complex()` with absolute error
/// `error * e^{value.log_scale}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub value: KernelValue,
    pub error: f64,
    pub evaluations: usize,
}

impl Integral {
    pub fn to_complex(&self) -> Complex64 {
        self.value.to_complex()
    }
}

/// Prepared evaluation of `kernel * e^{-rate z}` on one piece.
struct PieceIntegrand<'a> {
    piece: Piece,
    exps: &'a [f64],
    refs: &'a [(Complex64, f64)],
    start_off: Vec<Complex64>,
    end_off: Vec<Complex64>,
    rate: f64,
    shift: f64,
    t_scale: f64,
    sign: f64,
}

impl<'a> PieceIntegrand<'a> {
    /// Log of the kernel at offsets `base + unit * mag`. Branch points sitting exactly at
    /// the piece end take their distance from `ln_mag`, which stays finite when `mag`
    /// underflows.
    #[inline]
    fn log_kernel(&self, base: &[Complex64], unit: Complex64, mag: f64, ln_mag: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, o) in base.iter().enumerate() {
            let e = self.exps[i];
            let (d, ln_r) = if *o == Complex64::new(0.0, 0.0) {
                (unit, unit.norm().ln() + ln_mag)
            } else {
                let d = o + unit * mag;
                let r = d.norm();
                if r == 0.0 {
                    return Complex64::new(
                        if e > 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            f64::INFINITY
                        },
                        0.0,
                    );
                }
                (d, r.ln())
            };
            let (rc, ra) = self.refs[i];
            let w = d * rc;
            acc += Complex64::new(e * ln_r, e * (ra + w.im.atan2(w.re)));
        }
        if acc.re.is_nan() {
            // A zero exponent times an infinite log.
            return Complex64::new(f64::INFINITY, 0.0);
        }
        acc
    }

    /// Point and log of `kernel * dz/ds` at `s`; `None` where the integrand vanishes.
    #[inline]
    fn log_eval(&self, s: f64, oms: f64) -> Option<(Complex64, Complex64)> {
        self.log_eval_at(s, oms, s.ln(), oms.ln())
    }

    /// As [`Self::log_eval`], with `ln s` and `ln(1 - s)` supplied by the caller.
    #[inline]
    fn log_eval_at(
        &self,
        s: f64,
        oms: f64,
        ln_s: f64,
        ln_oms: f64,
    ) -> Option<(Complex64, Complex64)> {
        let (z, lk, jac) = match self.piece {
            Piece::Segment { start, end } => {
                let delta = end - start;
                if s <= 0.5 {
                    (
                        start + delta * s,
                        self.log_kernel(&self.start_off, delta, s, ln_s),
                        delta,
                    )
                } else {
                    (
                        end - delta * oms,
                        self.log_kernel(&self.end_off, -delta, oms, ln_oms),
                        delta,
                    )
                }
            }
            Piece::Ray { origin, dir, .. } => {
                if oms <= 0.0 {
                    return None;
                }
                let t = self.t_scale * s / oms;
                if !t.is_finite() {
                    return None;
                }
                let ln_t = self.t_scale.ln() + ln_s - ln_oms;
                (
                    origin + dir * t,
                    self.log_kernel(&self.start_off, dir, t, ln_t),
                    dir * (self.t_scale / (oms * oms)),
                )
            }
        };
        if lk.re == f64::NEG_INFINITY {
            return None;
        }
        Some((z, lk + (jac * self.sign).ln()))
    }

    #[inline]
    fn eval(&self, s: f64, oms: f64) -> Complex64 {
        self.eval_at(s, oms, s.ln(), oms.ln(), 0.0)
    }

    /// Integrand times `e^{ln_jac}`.
    #[inline]
    fn eval_at(&self, s: f64, oms: f64, ln_s: f64, ln_oms: f64, ln_jac: f64) -> Complex64 {
        match self.log_eval_at(s, oms, ln_s, ln_oms) {
            None => Complex64::new(0.0, 0.0),
            Some((_, l)) if l.re == f64::INFINITY => Complex64::new(f64::NAN, f64::NAN),
            Some((z, l)) => {
                let l = l - z * self.rate - self.shift + ln_jac;
                if l.re < -745.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    l.exp()
                }
            }
        }
    }

    /// Integrate over the piece, grading the ends where the kernel is nearly
    /// non-integrable: `s = u^left / 2` near the start and `1 - s = v^right / 2` near the
    /// end, with all logarithms formed before exponentiating.
    fn integrate(&self, rule: &UnitRule, left: f64, right: f64) -> UnitResult {
        if left == 1.0 && right == 1.0 {
            return integrate_unit(&mut |s, oms| self.eval(s, oms), rule);
        }
        let half = UnitRule {
            abs_tol: 0.5 * rule.abs_tol,
            ..*rule
        };
        let ln2 = std::f64::consts::LN_2;
        let mut a = integrate_unit(
            &mut |u, _| {
                let ln_s = left * u.ln() - ln2;
                let s = ln_s.exp();
                self.eval_at(
                    s,
                    1.0 - s,
                    ln_s,
                    (-s).ln_1p(),
                    (0.5 * left).ln() + (left - 1.0) * u.ln(),
                )
            },
            &half,
        );
        let b = integrate_unit(
            &mut |v, _| {
                let ln_oms = right * v.ln() - ln2;
                let oms = ln_oms.exp();
                self.eval_at(
                    1.0 - oms,
                    oms,
                    (-oms).ln_1p(),
                    ln_oms,
                    (0.5 * right).ln() + (right - 1.0) * v.ln(),
                )
            },
            &half,
        );
        a.value += b.value;
        a.error += b.error;
        a.evaluations += b.evaluations;
        a.converged &= b.converged;
        a
    }
}

fn ray_length(
    contour: &Contour,
    origin: Complex64,
    dir: Complex64,
    rates: &[f64],
    total_exp: f64,
    weight: &str,
    cfg: &QuadratureConfig,
) -> Result<f64, ContourError> {
    let unit_decay = rates
        .iter()
        .map(|r| r * dir.re / dir.norm())
        .fold(f64::INFINITY, f64::min);
    if unit_decay < 0.0 || (unit_decay == 0.0 && total_exp >= -1.0) {
        return Err(ContourError::DivergentTail {
            label: contour.label.clone(),
            weight: weight.to_string(),
        });
    }
    let alg = 1.0f64.max(origin.norm());
    Ok(cfg.tail_map.unwrap_or(1.0 / (unit_decay + 1.0 / alg)) / dir.norm())
}

fn piece_integrand<'a>(
    piece: &Piece,
    locs: &[f64],
    exps: &'a [f64],
    refs: &'a [(Complex64, f64)],
    t_scale: f64,
    rate: f64,
    shift: f64,
) -> PieceIntegrand<'a> {
    let (start_off, end_off, sign) = match *piece {
        Piece::Segment { start, end } => (
            locs.iter().map(|&b| start - b).collect(),
            locs.iter().map(|&b| end - b).collect(),
            1.0,
        ),
        Piece::Ray { origin, inward, .. } => (
            locs.iter().map(|&b| origin - b).collect(),
            Vec::new(),
            if inward { -1.0 } else { 1.0 },
        ),
    };
    PieceIntegrand {
        piece: *piece,
        exps,
        refs,
        start_off,
        end_off,
        rate,
        shift,
        t_scale,
        sign,
    }
}

/// Total kernel exponent at `p` when it is one of the branch points.
fn exponent_at_point(locs: &[f64], exps: &[f64], p: Complex64) -> f64 {
    if p.im != 0.0 {
        return 0.0;
    }
    locs.iter()
        .zip(exps)
        .filter(|(l, _)| **l == p.re)
        .map(|(_, e)| e)
        .sum()
}

/// Integrate `kernel(z) e^{-rate z} / (z - pole)` along `contour`.
pub fn integrate_kernel(
    kernel: &Kernel,
    contour: &Contour,
    weight: &Weight,
    cfg: &QuadratureConfig,
) -> Result<Integral, ContourError> {
    let k = match weight.pole {
        Some(p) => kernel.with_pole(p),
        None => kernel.clone(),
    };
    let locs: Vec<f64> = k.points.iter().map(|p| p.0).collect();
    let exps: Vec<f64> = k.points.iter().map(|p| p.1).collect();
    let tracker = BranchTracker::new(contour, &locs)?;
    let rate = weight.rate;
    let shift = contour
        .vertices()
        .iter()
        .map(|v| -rate * v.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let total_exp = k.total_exponent();
    let rule = cfg.unit_rule();
    let mut value = Complex64::new(0.0, 0.0);
    let mut error = 0.0;
    let mut evaluations = 0;
    for (pi, piece) in contour.pieces.iter().enumerate() {
        let t_scale = match *piece {
            Piece::Segment { .. } => 1.0,
            Piece::Ray { origin, dir, .. } => ray_length(
                contour,
                origin,
                dir,
                &[rate],
                total_exp,
                &weight.describe(),
                cfg,
            )?,
        };
        let pie = piece_integrand(
            piece,
            &locs,
            &exps,
            tracker.piece_refs(pi),
            t_scale,
            rate,
            shift,
        );
        let (first, last) = match *piece {
            Piece::Segment { start, end } => (Some(start), Some(end)),
            Piece::Ray { origin, .. } => (Some(origin), None),
        };
        let grade = |p: Option<Complex64>| {
            grading_power(p.map_or(0.0, |p| exponent_at_point(&locs, &exps, p)))
        };
        let res = pie.integrate(&rule, grade(first), grade(last));
        evaluations += res.evaluations;
        if !res.converged || !res.value.re.is_finite() || !res.value.im.is_finite() {
            return Err(ContourError::NoConvergence {
                label: contour.label.clone(),
                weight: weight.describe(),
                error: res.error,
                value: res.value.norm(),
            });
        }
        value += res.value;
        error += res.error;
    }
    Ok(Integral {
        value: KernelValue::new(value, shift),
        error,
        evaluations,
    })
}

/// Integrate `psi(z) * weight` along `contour`.
pub fn integrate(
    model: &OuModel,
    contour: &Contour,
    weight: &Weight,
    cfg: &QuadratureConfig,
) -> Result<Integral, ContourError> {
    integrate_kernel(&Kernel::psi(model), contour, weight, cfg)
}

/// Frozen tanh-sinh nodes for `rate -> int kernel(z) e^{-rate z} dz` over a closed range of rates.
///
/// The contour integral becomes a finite exponential sum, which is what makes repeated
/// evaluation inside jump integrals affordable.
#[derive(Debug, Clone)]
pub struct FixedRule {
    nodes: Vec<Complex64>,
    log_weights: Vec<Complex64>,
    min_re: f64,
    max_re: f64,
    pub level: usize,
    pub rates: (f64, f64),
}

const FIXED_MIN_LEVEL: usize = 3;
const FIXED_MAX_LEVEL: usize = 10;
const FIXED_TRIM: f64 = 1e-17;

impl FixedRule {
    /// Build nodes for every rate in `[lo, hi]`. Accuracy `tol` is relative to the sum of
    /// absolute term sizes, checked at the ends and midpoint of the range.
    pub fn build(
        kernel: &Kernel,
        contour: &Contour,
        lo: f64,
        hi: f64,
        tol: f64,
        cfg: &QuadratureConfig,
    ) -> Result<FixedRule, ContourError> {
        assert!(lo <= hi);
        let locs: Vec<f64> = kernel.points.iter().map(|p| p.0).collect();
        let exps: Vec<f64> = kernel.points.iter().map(|p| p.1).collect();
        let tracker = BranchTracker::new(contour, &locs)?;
        let total_exp = kernel.total_exponent();
        let label = format!("exp(-y z), y in [{lo}, {hi}]");
        let mut integrands = Vec::new();
        for (pi, piece) in contour.pieces.iter().enumerate() {
            let t_scale = match *piece {
                Piece::Segment { .. } => 1.0,
                Piece::Ray { origin, dir, .. } => {
                    ray_length(contour, origin, dir, &[lo, hi], total_exp, &label, cfg)?
                }
            };
            integrands.push(piece_integrand(
                piece,
                &locs,
                &exps,
                tracker.piece_refs(pi),
                t_scale,
                0.0,
                0.0,
            ));
        }
        let samples = [lo, 0.5 * (lo + hi), hi];
        let mut prev: Option<FixedRule> = None;
        for level in FIXED_MIN_LEVEL..=FIXED_MAX_LEVEL {
            let rule = Self::at_level(&integrands, level, lo, hi);
            if let Some(p) = &prev {
                let ok = samples.iter().all(|&r| {
                    let (a, mag) = rule.eval_with_magnitude(r);
                    let b = p.eval(r).at_scale(a.log_scale);
                    let d = (a.value - b).norm();
                    d.is_finite() && d <= tol * mag
                });
                // The level difference bounds the error of the coarser rule.
                if ok {
                    return Ok(p.clone().trimmed(&samples));
                }
            }
            prev = Some(rule);
        }
        let p = prev.expect("at least one level");
        let (v, _) = p.eval_with_magnitude(hi);
        Err(ContourError::NoConvergence {
            label: contour.label.clone(),
            weight: label,
            error: f64::NAN,
            value: v.value.norm(),
        })
    }

    fn at_level(integrands: &[PieceIntegrand], level: usize, lo: f64, hi: f64) -> FixedRule {
        let h = 0.5f64.powi(level as i32);
        let kmax = (T_MAX / h) as i64;
        let mut nodes = Vec::new();
        let mut log_weights = Vec::new();
        for pie in integrands {
            for k in -kmax..=kmax {
                let (s, oms, w) = if k == 0 {
                    (0.5, 0.5, std::f64::consts::FRAC_PI_2)
                } else {
                    let (delta, w) = node(k.unsigned_abs() as f64 * h);
                    let off = 0.5 * delta;
                    if off < 1e-300 {
                        continue;
                    }
                    if k > 0 {
                        (1.0 - off, off, w)
                    } else {
                        (off, 1.0 - off, w)
                    }
                };
                if let Some((z, l)) = pie.log_eval(s, oms) {
                    if l.re.is_finite() {
                        nodes.push(z);
                        log_weights.push(l + (0.5 * h * w).ln());
                    }
                }
            }
        }
        let min_re = nodes.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let max_re = nodes.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        FixedRule {
            nodes,
            log_weights,
            min_re,
            max_re,
            level,
            rates: (lo, hi),
        }
    }

    fn shift(&self, rate: f64) -> f64 {
        if rate >= 0.0 {
            -rate * self.min_re
        } else {
            -rate * self.max_re
        }
    }

    fn eval_with_magnitude(&self, rate: f64) -> (KernelValue, f64) {
        let shift = self.shift(rate);
        let mut sum = Complex64::new(0.0, 0.0);
        let mut mag = 0.0;
        for (z, l) in self.nodes.iter().zip(&self.log_weights) {
            let t = (l - z * rate - shift).exp();
            sum += t;
            mag += t.norm();
        }
        (KernelValue::new(sum, shift), mag)
    }

    /// Drop nodes whose contribution is negligible at every sampled rate.
    fn trimmed(self, samples: &[f64]) -> FixedRule {
        let scales: Vec<(f64, f64)> = samples
            .iter()
            .map(|&r| (self.shift(r), self.eval_with_magnitude(r).1))
            .collect();
        let mut nodes = Vec::new();
        let mut log_weights = Vec::new();
        for (z, l) in self.nodes.iter().zip(&self.log_weights) {
            let keep = samples
                .iter()
                .zip(&scales)
                .any(|(&r, &(sh, mag))| (l.re - z.re * r - sh).exp() > FIXED_TRIM * mag);
            if keep {
                nodes.push(*z);
                log_weights.push(*l);
            }
        }
        FixedRule {
            min_re: nodes.iter().map(|z| z.re).fold(f64::INFINITY, f64::min),
            max_re: nodes.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max),
            nodes,
            log_weights,
            ..self
        }
    }

    /// `int kernel(z) e^{-rate z} dz`.
    pub fn eval(&self, rate: f64) -> KernelValue {
        self.eval_with_magnitude(rate).0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Integral of `|kernel(z) e^{-rate z} / (z - pole)| |dz|`, used to verify absolute integrability.
pub fn integrate_abs(
    kernel: &Kernel,
    contour: &Contour,
    weight: &Weight,
    cfg: &QuadratureConfig,
) -> Result<f64, ContourError> {
    let k = match weight.pole {
        Some(p) => kernel.with_pole(p),
        None => kernel.clone(),
    };
    // Replacing every exponent's phase by zero turns the integrand into its modulus
    // once the direction factor is dropped; reuse the general machinery on a real kernel.
    let mut total = 0.0;
    for piece in &contour.pieces {
        let single = Contour {
            pieces: vec![*piece],
            anchor: 0,
            label: contour.label.clone(),
            shape: Shape::Custom,
        };
        let rule = cfg.unit_rule();
        let locs: Vec<f64> = k.points.iter().map(|p| p.0).collect();
        let rate = weight.rate;
        let (t_scale, dir_norm) = match *piece {
            Piece::Segment { start, end } => (1.0, (end - start).norm()),
            Piece::Ray { origin, dir, .. } => {
                let unit_decay = rate * dir.re / dir.norm();
                if unit_decay < 0.0 || (unit_decay == 0.0 && k.total_exponent() >= -1.0) {
                    return Err(ContourError::DivergentTail {
                        label: contour.label.clone(),
                        weight: weight.describe(),
                    });
                }
                let alg = 1.0f64.max(origin.norm());
                (
                    cfg.tail_map.unwrap_or(1.0 / (unit_decay + 1.0 / alg)) / dir.norm(),
                    dir.norm(),
                )
            }
        };
        let shift = single
            .vertices()
            .iter()
            .map(|v| -rate * v.re)
            .fold(f64::NEG_INFINITY, f64::max);
        let res = integrate_unit(
            &mut |s, oms| {
                let (z, offs, jac): (Complex64, Vec<Complex64>, f64) = match *piece {
                    Piece::Segment { .. } => {
                        let t = if s <= 0.5 { s } else { 1.0 - oms };
                        let offs = locs.iter().map(|&b| piece.offset(t, b)).collect();
                        (piece.point(t), offs, dir_norm)
                    }
                    Piece::Ray { .. } => {
                        if oms <= 0.0 {
                            return Complex64::new(0.0, 0.0);
                        }
                        let t = t_scale * s / oms;
                        if !t.is_finite() {
                            return Complex64::new(0.0, 0.0);
                        }
                        let offs = locs.iter().map(|&b| piece.offset(t, b)).collect();
                        (piece.point(t), offs, dir_norm * t_scale / (oms * oms))
                    }
                };
                let mut l = -rate * z.re - shift;
                for (d, &(_, e)) in offs.iter().zip(&k.points) {
                    let r = d.norm();
                    if r == 0.0 {
                        if e > 0.0 {
                            return Complex64::new(0.0, 0.0);
                        }
                        return Complex64::new(f64::INFINITY, 0.0);
                    }
                    l += e * r.ln();
                }
                Complex64::new(l.exp() * jac, 0.0)
            },
            &rule,
        );
        if !res.converged || !res.value.re.is_finite() {
            return Err(ContourError::NoConvergence {
                label: contour.label.clone(),
                weight: format!("|{}|", weight.describe()),
                error: res.error,
                value: res.value.norm(),
            });
        }
        total += res.value.re * shift.exp();
    }
    Ok(total)
}

/// Which set of suitability conditions a contour is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContourRole {
    /// Single-eigenfunction contour with weights `e^{-y z}`, `y >= level`.
    SingleRegion,
    /// Contour used for `y > 0` in the two-region construction.
    Positive,
    /// Contour used for `level <= y < 0` in the two-region construction.
    Level,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionItem {
    pub item: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub contour: String,
    pub items: Vec<ConditionItem>,
}

impl ConditionReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }
}

fn boundary_term(kernel: &Kernel, contour: &Contour, y: f64) -> (Complex64, Complex64) {
    // value of z psi(z) e^{-y z} at the traversal start and end; infinite ends give 0 when decaying
    let at = |p: Option<Complex64>| -> Complex64 {
        match p {
            Some(z) => {
                let v = kernel
                    .eval_principal(z)
                    .unwrap_or(Complex64::new(f64::NAN, 0.0));
                if v == Complex64::new(0.0, 0.0) {
                    v
                } else {
                    v * z * (-z * y).exp()
                }
            }
            None => Complex64::new(0.0, 0.0),
        }
    };
    let first = contour.pieces.first().expect("non-empty contour");
    let last = contour.pieces.last().expect("non-empty contour");
    (at(first.traversal_start()), at(last.traversal_end()))
}

/// Verify integrability and boundary conditions for a contour's role.
pub fn check_conditions(
    model: &OuModel,
    contour: &Contour,
    level: f64,
    role: ContourRole,
) -> ConditionReport {
    let kernel = Kernel::psi(model);
    let cfg = QuadratureConfig::with_rel_tol(1e-6);
    let mut items = Vec::new();
    let mut push_abs = |name: &str, w: Weight| {
        let r = integrate_abs(&kernel, contour, &w, &cfg);
        let (passed, detail) = match r {
            Ok(v) if v.is_finite() => (true, format!("{v:.6e}")),
            Ok(v) => (false, format!("{v}")),
            Err(e) => (false, e.to_string()),
        };
        items.push(ConditionItem {
            item: name.into(),
            passed,
            detail,
        });
    };
    let ys: Vec<f64> = match role {
        ContourRole::SingleRegion => vec![level, level + 1.0, level + 5.0],
        ContourRole::Positive => vec![0.25, 1.0, 5.0],
        ContourRole::Level => vec![level, 0.5 * level, 0.1 * level],
    };
    match role {
        ContourRole::SingleRegion => {
            push_abs("(i) |psi| e^{-level Re z}", Weight::exp(level));
            for k in 0..model.r() {
                push_abs(
                    &format!("(iii) |psi/(z - mu_{})| e^(-level Re z)", k + 1),
                    Weight::exp_pole(level, model.mus()[k]),
                );
            }
        }
        ContourRole::Positive => {
            for &y in &ys {
                push_abs(&format!("(i) |psi| e^(-{y} Re z)"), Weight::exp(y));
            }
            for k in 0..model.r() {
                push_abs(
                    &format!("(ii) |psi/(z - mu_{})|", k + 1),
                    Weight::pole(model.mus()[k]),
                );
            }
            for d in 0..model.s() {
                push_abs(
                    &format!("(iii) |psi/(z + nu_{})|", d + 1),
                    Weight::pole(-model.nus()[d]),
                );
            }
        }
        ContourRole::Level => {
            for &y in &ys {
                push_abs(&format!("(i') |psi| e^(-{y} Re z)"), Weight::exp(y));
            }
            for k in 0..model.r() {
                push_abs(
                    &format!("(ii') |psi/(z - mu_{})|", k + 1),
                    Weight::pole(model.mus()[k]),
                );
                push_abs(
                    &format!("(iii') |psi/(z - mu_{})| e^(-level Re z)", k + 1),
                    Weight::exp_pole(level, model.mus()[k]),
                );
            }
            for d in 0..model.s() {
                push_abs(
                    &format!("(iv') |psi/(z + nu_{})|", d + 1),
                    Weight::pole(-model.nus()[d]),
                );
            }
        }
    }
    for &y in &ys {
        let (a, b) = boundary_term(&kernel, contour, y);
        let passed = (a - b).norm() <= 1e-12 && a.norm().is_finite();
        items.push(ConditionItem {
            item: format!("boundary z psi(z) e^(-{y} z) matches at both ends"),
            passed,
            detail: format!("start {a:.3e}, end {b:.3e}"),
        });
    }
    ConditionReport {
        contour: contour.label.clone(),
        items,
    }
}
