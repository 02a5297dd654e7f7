//! The algebraic kernel `psi(z) = prod (z - b)^{e_b}` and branch tracking along contours.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::Contour;
use crate::model::OuModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("evaluation at singular branch point {location}")]
    AtBranchPoint { location: f64 },
    #[error("branch tracking failed: path reference point coincides with {location}")]
    DegeneratePath { location: f64 },
}

/// A complex number stored as `value * e^{log_scale}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub value: Complex64,
    pub log_scale: f64,
}

impl KernelValue {
    pub fn new(value: Complex64, log_scale: f64) -> Self {
        KernelValue { value, log_scale }
    }

    pub fn from_complex(value: Complex64) -> Self {
        KernelValue {
            value,
            log_scale: 0.0,
        }
    }

    pub fn to_complex(&self) -> Complex64 {
        self.value * self.log_scale.exp()
    }

    /// Mantissa expressed relative to another scale.
    pub fn at_scale(&self, log_scale: f64) -> Complex64 {
        self.value * (self.log_scale - log_scale).exp()
    }

    pub fn mul(&self, other: &KernelValue) -> KernelValue {
        KernelValue {
            value: self.value * other.value,
            log_scale: self.log_scale + other.log_scale,
        }
    }

    pub fn scale(&self, c: Complex64) -> KernelValue {
        KernelValue {
            value: self.value * c,
            log_scale: self.log_scale,
        }
    }

    /// `ln |value * e^{log_scale}|`.
    pub fn ln_abs(&self) -> f64 {
        self.value.norm().ln() + self.log_scale
    }
}

/// A product of algebraic factors `(z - b)^{e_b}` over real points `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    /// `(location, exponent)` pairs.
    pub points: Vec<(f64, f64)>,
}

impl Kernel {
    /// The kernel of the model: `z^{-1} prod (z - mu_k)^{-p lambda alpha_k / kappa} prod (z + nu_d)^{-q lambda beta_d / kappa}`.
    pub fn psi(model: &OuModel) -> Kernel {
        Kernel {
            points: model
                .classify_points()
                .into_iter()
                .map(|p| (p.location, p.exponent))
                .collect(),
        }
    }

    /// `z^rho`.
    pub fn power(rho: f64) -> Kernel {
        Kernel {
            points: vec![(0.0, rho)],
        }
    }

    pub fn exponent_at(&self, location: f64) -> Option<f64> {
        self.points.iter().find(|p| p.0 == location).map(|p| p.1)
    }

    /// The kernel with the factor at `location` removed.
    pub fn excluding(&self, location: f64) -> Kernel {
        Kernel {
            points: self
                .points
                .iter()
                .copied()
                .filter(|p| p.0 != location)
                .collect(),
        }
    }

    /// The kernel multiplied by `(z - location)^{-1}`.
    pub fn with_pole(&self, location: f64) -> Kernel {
        let mut points = self.points.clone();
        match points.iter_mut().find(|p| p.0 == location) {
            Some(p) => p.1 -= 1.0,
            None => points.push((location, -1.0)),
        }
        Kernel { points }
    }

    /// Sum of exponents: `|kernel(z)| ~ |z|^{total}` at infinity.
    pub fn total_exponent(&self) -> f64 {
        self.points.iter().map(|p| p.1).sum()
    }

    /// `ln kernel` from offsets `z - b` and their arguments.
    #[inline]
    pub fn log_from_parts(
        &self,
        offsets: &[Complex64],
        args: &[f64],
    ) -> Result<Complex64, KernelError> {
        let mut acc = Complex64::new(0.0, 0.0);
        for ((&(b, e), d), a) in self.points.iter().zip(offsets).zip(args) {
            let r = d.norm();
            if r == 0.0 {
                if e > 0.0 {
                    return Ok(Complex64::new(f64::NEG_INFINITY, 0.0));
                }
                return Err(KernelError::AtBranchPoint { location: b });
            }
            acc += Complex64::new(e * r.ln(), e * a);
        }
        Ok(acc)
    }

    /// Evaluate with principal arguments; on the real axis the limit from the upper half-plane is used.
    pub fn eval_principal(&self, z: Complex64) -> Result<Complex64, KernelError> {
        let offsets: Vec<Complex64> = self
            .points
            .iter()
            .map(|&(b, _)| upper_offset(z, b))
            .collect();
        let args: Vec<f64> = offsets.iter().map(|d| d.arg()).collect();
        let l = self.log_from_parts(&offsets, &args)?;
        Ok(if l.re == f64::NEG_INFINITY {
            Complex64::new(0.0, 0.0)
        } else {
            l.exp()
        })
    }
}

fn upper_offset(z: Complex64, b: f64) -> Complex64 {
    let d = z - b;
    if d.im == 0.0 {
        Complex64::new(d.re, 0.0)
    } else {
        d
    }
}

/// `psi` of the model with principal branches.
pub fn psi_principal(model: &OuModel, z: Complex64) -> Result<Complex64, KernelError> {
    Kernel::psi(model).eval_principal(z)
}

/// `psi` with the factor at `b` removed, principal branches (upper limit on the real axis).
pub fn psi_excluding_principal(
    model: &OuModel,
    b: f64,
    z: Complex64,
) -> Result<Complex64, KernelError> {
    Kernel::psi(model).excluding(b).eval_principal(z)
}

/// Large-`|z|` envelope `|z|^{-1-lambda/kappa}`.
pub fn decay_estimate(model: &OuModel, z: Complex64) -> f64 {
    z.norm().powf(-1.0 - model.lambda / model.kappa)
}

/// Continuous arguments of `z - b` along a contour.
///
/// Arguments are principal at the reference point of the anchor piece and are
/// continued through the junctions of consecutive pieces.
#[derive(Debug, Clone)]
pub struct BranchTracker {
    locations: Vec<f64>,
    /// Per piece: reference offset `P - b` conjugated and its argument.
    refs: Vec<Vec<(Complex64, f64)>>,
}

fn rel_angle(d: Complex64, ref_conj: Complex64) -> f64 {
    let w = d * ref_conj;
    w.im.atan2(w.re)
}

impl BranchTracker {
    pub fn new(contour: &Contour, locations: &[f64]) -> Result<Self, KernelError> {
        let pieces = &contour.pieces;
        let n = pieces.len();
        let mut refs: Vec<Vec<(Complex64, f64)>> = vec![Vec::new(); n];
        let ref_points: Vec<Complex64> = pieces.iter().map(|p| p.reference_point()).collect();
        for &b in locations {
            for p in &ref_points {
                if *p == Complex64::new(b, 0.0) {
                    return Err(KernelError::DegeneratePath { location: b });
                }
            }
        }
        let a = contour.anchor;
        refs[a] = locations
            .iter()
            .map(|&b| {
                let d = ref_points[a] - b;
                (d.conj(), d.arg())
            })
            .collect();
        // forward through junctions
        for k in a + 1..n {
            let j = pieces[k - 1]
                .traversal_end()
                .expect("interior pieces end at a finite point");
            refs[k] = locations
                .iter()
                .enumerate()
                .map(|(bi, &b)| {
                    let (rc, ra) = refs[k - 1][bi];
                    let dj = j - b;
                    if dj.norm() == 0.0 {
                        return Err(KernelError::DegeneratePath { location: b });
                    }
                    let aj = ra + rel_angle(dj, rc);
                    let dp = ref_points[k] - b;
                    Ok((dp.conj(), aj + rel_angle(dp, dj.conj())))
                })
                .collect::<Result<_, _>>()?;
        }
        for k in (0..a).rev() {
            let j = pieces[k]
                .traversal_end()
                .expect("interior pieces end at a finite point");
            refs[k] = locations
                .iter()
                .enumerate()
                .map(|(bi, &b)| {
                    let (rc, ra) = refs[k + 1][bi];
                    let dj = j - b;
                    if dj.norm() == 0.0 {
                        return Err(KernelError::DegeneratePath { location: b });
                    }
                    let aj = ra + rel_angle(dj, rc);
                    let dp = ref_points[k] - b;
                    Ok((dp.conj(), aj + rel_angle(dp, dj.conj())))
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(BranchTracker {
            locations: locations.to_vec(),
            refs,
        })
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    /// Argument of `z - b_index` given the offset `d = z - b` on piece `piece`.
    #[inline]
    pub fn arg(&self, piece: usize, index: usize, d: Complex64) -> f64 {
        let (rc, ra) = self.refs[piece][index];
        ra + rel_angle(d, rc)
    }

    /// Conjugated reference offsets and their arguments for one piece.
    pub fn piece_refs(&self, piece: usize) -> &[(Complex64, f64)] {
        &self.refs[piece]
    }

    /// Arguments at the reference point of each piece.
    pub fn reference_args(&self, piece: usize) -> Vec<f64> {
        self.refs[piece].iter().map(|r| r.1).collect()
    }
}

/// Evaluate `kernel` at path parameter `t` of `piece` (segment fraction or ray length).
pub fn eval_on_path(
    kernel: &Kernel,
    contour: &Contour,
    tracker: &BranchTracker,
    piece: usize,
    t: f64,
) -> Result<Complex64, KernelError> {
    let pc = &contour.pieces[piece];
    let offsets: Vec<Complex64> = kernel
        .points
        .iter()
        .map(|&(b, _)| pc.offset(t, b))
        .collect();
    let args: Vec<f64> = kernel
        .points
        .iter()
        .zip(&offsets)
        .map(|(&(b, _), d)| {
            let idx = tracker
                .locations()
                .iter()
                .position(|&l| l == b)
                .expect("tracker covers kernel points");
            tracker.arg(piece, idx, *d)
        })
        .collect();
    let l = kernel.log_from_parts(&offsets, &args)?;
    Ok(if l.re == f64::NEG_INFINITY {
        Complex64::new(0.0, 0.0)
    } else {
        l.exp()
    })
}

/// `psi(gamma(t))` with branches continued along the contour.
pub fn psi(
    model: &OuModel,
    contour: &Contour,
    tracker: &BranchTracker,
    piece: usize,
    t: f64,
) -> Result<Complex64, KernelError> {
    eval_on_path(&Kernel::psi(model), contour, tracker, piece, t)
}

/// `psi` with the factor at `b` removed, continued along the contour.
pub fn psi_excluding(
    model: &OuModel,
    b: f64,
    contour: &Contour,
    tracker: &BranchTracker,
    piece: usize,
    t: f64,
) -> Result<Complex64, KernelError> {
    eval_on_path(&Kernel::psi(model).excluding(b), contour, tracker, piece, t)
}
