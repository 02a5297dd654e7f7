//! Model parameters, validation and the jump law.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating a model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mixture is not a probability density: {0}")]
    NonDensity(String),
    #[error("bad ordering: {0}")]
    BadOrdering(String),
    #[error("kernel exponent at {location} is exactly zero")]
    ZeroExponent { location: f64 },
}

/// Unvalidated parameter block, as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub kappa: f64,
    pub lambda: f64,
    pub p: f64,
    pub alphas: Vec<f64>,
    pub mus: Vec<f64>,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub nus: Vec<f64>,
}

/// One side of the two-sided jump law: density `sum c_k r_k e^{-r_k m}` in the magnitude `m > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpMixture {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ExpMixture {
    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Density of the magnitude at `m >= 0`.
    pub fn density(&self, m: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(c, r)| c * r * (-r * m).exp())
            .sum()
    }

    /// Survival function `P(M > m)`.
    pub fn survival(&self, m: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(c, r)| c * (-r * m).exp())
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(c, r)| c / r)
            .sum()
    }

    pub fn is_convex(&self) -> bool {
        self.weights.iter().all(|&c| c > 0.0)
    }

    /// Minimum of `density(m) e^{r_1 m}` over `m >= 0`, together with its location.
    ///
    /// The scaled density tends to `c_1 r_1 > 0`, so nonnegativity reduces to a
    /// search over a bounded window followed by refinement of stationary points.
    pub fn scaled_density_minimum(&self) -> (f64, f64) {
        let r1 = self.rates[0];
        let scaled = |m: f64| -> f64 {
            self.weights
                .iter()
                .zip(&self.rates)
                .map(|(c, r)| c * r * (-(r - r1) * m).exp())
                .sum()
        };
        let slope = |m: f64| -> f64 {
            self.weights
                .iter()
                .zip(&self.rates)
                .map(|(c, r)| -c * r * (r - r1) * (-(r - r1) * m).exp())
                .sum()
        };
        let lead = self.weights[0] * r1;
        let rest: f64 = self
            .weights
            .iter()
            .zip(&self.rates)
            .skip(1)
            .map(|(c, r)| c.abs() * r)
            .sum();
        // Beyond `window` the leading term dominates all others.
        let window = if self.len() < 2 || rest <= lead {
            1.0 / r1
        } else {
            ((rest / lead).ln() + 1.0) / (self.rates[1] - r1)
        }
        .max(1e-3);
        let n = 4000;
        let mut best = (scaled(0.0), 0.0);
        let mut prev_m = 0.0;
        let mut prev_s = slope(0.0);
        for i in 1..=n {
            let m = window * i as f64 / n as f64;
            let v = scaled(m);
            if v < best.0 {
                best = (v, m);
            }
            let s = slope(m);
            if prev_s < 0.0 && s >= 0.0 {
                let (mut lo, mut hi) = (prev_m, m);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if slope(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let mm = 0.5 * (lo + hi);
                let vv = scaled(mm);
                if vv < best.0 {
                    best = (vv, mm);
                }
            }
            prev_m = m;
            prev_s = s;
        }
        best
    }
}

/// Classification of a branch point of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointKind {
    Zero,
    Singularity,
}

/// A branch point of the kernel with its algebraic exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointClass {
    pub location: f64,
    pub exponent: f64,
    pub kind: PointKind,
}

impl PointClass {
    fn new(location: f64, exponent: f64) -> Self {
        let kind = if exponent > 0.0 {
            PointKind::Zero
        } else {
            PointKind::Singularity
        };
        PointClass {
            location,
            exponent,
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelSign {
    Positive,
    Negative,
}

/// Which analytic recipe applies to a (drift, level) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub drift: DriftSign,
    pub level: LevelSign,
    /// A continuous (creeping) crossing of the level can happen.
    pub continuity_possible: bool,
}

/// A validated jump-driven Ornstein-Uhlenbeck model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuModel {
    pub kappa: f64,
    pub lambda: f64,
    pub p: f64,
    pub q: f64,
    /// Law of downward jump magnitudes.
    pub down: ExpMixture,
    /// Law of upward jump magnitudes.
    pub up: ExpMixture,
}

fn check_side(name: &str, w: &[f64], rates: &[f64]) -> Result<(), ModelError> {
    if w.len() != rates.len() {
        return Err(ModelError::InvalidParameter(format!(
            "{name}: {} weights but {} rates",
            w.len(),
            rates.len()
        )));
    }
    if w.iter().chain(rates).any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidParameter(format!(
            "{name}: non-finite entry"
        )));
    }
    if rates.iter().any(|&r| r <= 0.0) {
        return Err(ModelError::InvalidParameter(format!(
            "{name}: rates must be positive"
        )));
    }
    if rates.windows(2).any(|p| p[1] <= p[0]) {
        return Err(ModelError::BadOrdering(format!(
            "{name}: rates must be strictly increasing"
        )));
    }
    if w.is_empty() {
        return Ok(());
    }
    if w[0] <= 0.0 {
        return Err(ModelError::NonDensity(format!(
            "{name}: leading weight must be positive"
        )));
    }
    let sum: f64 = w.iter().sum();
    let scale: f64 = w.iter().map(|v| v.abs()).sum();
    if (sum - 1.0).abs() > 1e-12 * scale.max(1.0) {
        return Err(ModelError::NonDensity(format!(
            "{name}: weights sum to {sum}, not 1"
        )));
    }
    let mix = ExpMixture {
        weights: w.to_vec(),
        rates: rates.to_vec(),
    };
    let (min, at) = mix.scaled_density_minimum();
    let tol = 1e-12 * w[0] * rates[0];
    if min < -tol {
        return Err(ModelError::NonDensity(format!(
            "{name}: density negative near magnitude {at:.6}"
        )));
    }
    Ok(())
}

/// Validate raw parameters and build a model.
pub fn validate_model(params: &ModelParams) -> Result<OuModel, ModelError> {
    let ModelParams {
        kappa,
        lambda,
        p,
        alphas,
        mus,
        betas,
        nus,
    } = params;
    if !kappa.is_finite() || *kappa == 0.0 {
        return Err(ModelError::InvalidParameter(
            "kappa must be finite and nonzero".into(),
        ));
    }
    if !lambda.is_finite() || *lambda <= 0.0 {
        return Err(ModelError::InvalidParameter(
            "lambda must be positive".into(),
        ));
    }
    if !p.is_finite() || *p <= 0.0 || *p > 1.0 {
        return Err(ModelError::InvalidParameter("p must lie in (0, 1]".into()));
    }
    if alphas.is_empty() {
        return Err(ModelError::InvalidParameter(
            "at least one downward component is required".into(),
        ));
    }
    check_side("downward", alphas, mus)?;
    check_side("upward", betas, nus)?;
    let q = 1.0 - p;
    if q > 0.0 && betas.is_empty() {
        return Err(ModelError::InvalidParameter(
            "p < 1 requires at least one upward component".into(),
        ));
    }
    let model = OuModel {
        kappa: *kappa,
        lambda: *lambda,
        p: *p,
        q,
        down: ExpMixture {
            weights: alphas.clone(),
            rates: mus.clone(),
        },
        up: ExpMixture {
            weights: betas.clone(),
            rates: nus.clone(),
        },
    };
    for pc in model.raw_points() {
        if pc.1 == 0.0 {
            return Err(ModelError::ZeroExponent { location: pc.0 });
        }
    }
    Ok(model)
}

impl OuModel {
    /// Number of downward components.
    pub fn r(&self) -> usize {
        self.down.len()
    }

    /// Number of upward components.
    pub fn s(&self) -> usize {
        self.up.len()
    }

    pub fn mus(&self) -> &[f64] {
        &self.down.rates
    }

    pub fn nus(&self) -> &[f64] {
        &self.up.rates
    }

    pub fn alphas(&self) -> &[f64] {
        &self.down.weights
    }

    pub fn betas(&self) -> &[f64] {
        &self.up.weights
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            kappa: self.kappa,
            lambda: self.lambda,
            p: self.p,
            alphas: self.down.weights.clone(),
            mus: self.down.rates.clone(),
            betas: self.up.weights.clone(),
            nus: self.up.rates.clone(),
        }
    }

    fn raw_points(&self) -> Vec<(f64, f64)> {
        let c = self.lambda / self.kappa;
        let mut out = Vec::with_capacity(self.r() + self.s() + 1);
        for (b, n) in self.up.weights.iter().zip(&self.up.rates).rev() {
            out.push((-n, -self.q * c * b));
        }
        out.push((0.0, -1.0));
        for (a, m) in self.down.weights.iter().zip(&self.down.rates) {
            out.push((*m, -self.p * c * a));
        }
        out
    }

    /// Density of the jump law at `u != 0`.
    pub fn jump_density(&self, u: f64) -> f64 {
        if u < 0.0 {
            self.p * self.down.density(-u)
        } else if u > 0.0 {
            self.q * self.up.density(u)
        } else {
            f64::NAN
        }
    }

    /// Distribution function of the jump law.
    pub fn jump_cdf(&self, u: f64) -> f64 {
        if u < 0.0 {
            self.p * self.down.survival(-u)
        } else {
            self.p + self.q * (1.0 - self.up.survival(u))
        }
    }

    /// Branch points `(-nu_s, .., -nu_1, 0, mu_1, .., mu_r)` with their exponents.
    pub fn classify_points(&self) -> Vec<PointClass> {
        self.raw_points()
            .into_iter()
            .map(|(l, e)| PointClass::new(l, e))
            .collect()
    }

    /// Exponent of the kernel at `mu_k` (zero based).
    pub fn mu_exponent(&self, k: usize) -> f64 {
        -self.p * self.lambda * self.down.weights[k] / self.kappa
    }

    /// Exponent of the kernel at `-nu_d` (zero based).
    pub fn nu_exponent(&self, d: usize) -> f64 {
        -self.q * self.lambda * self.up.weights[d] / self.kappa
    }

    /// Classify the first-passage problem for level `level`.
    pub fn scenario(&self, level: f64) -> Scenario {
        let drift = if self.kappa > 0.0 {
            DriftSign::Positive
        } else {
            DriftSign::Negative
        };
        let lvl = if level > 0.0 {
            LevelSign::Positive
        } else {
            LevelSign::Negative
        };
        Scenario {
            drift,
            level: lvl,
            continuity_possible: !(level * self.kappa > 0.0),
        }
    }
}

/// The model used throughout the documentation and tests.
pub fn reference_model() -> OuModel {
    validate_model(&ModelParams {
        kappa: 1.0,
        lambda: 1.0,
        p: 2.0 / 3.0,
        alphas: vec![1.0],
        mus: vec![1.0],
        betas: vec![1.0],
        nus: vec![1.0],
    })
    .expect("reference model is valid")
}
