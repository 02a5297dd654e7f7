//! Exact path simulation of first passage below a level.
//!
//! Between jumps the state follows `X(t) = X(s) e^{kappa (t - s)}`, so a continuous
//! crossing inside a waiting interval is detected in closed form. Paths never touch a
//! time grid. Each path draws from its own ChaCha stream, keyed by the seed and the
//! path index, so estimates do not depend on how paths are scheduled across threads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::eigensystem::SolverOptions;
use crate::model::{ExpMixture, OuModel};
use crate::ruin::asymptotic_k;

/// Settings for a batch of simulated paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// Paths still running at this time are declared survived.
    pub horizon: f64,
    /// Under positive drift, paths reaching this state are declared survived.
    pub upper_barrier: Option<f64>,
    pub seed: u64,
    pub n_paths: usize,
    /// Bound on `P(crossing | barrier reached)`, attached to estimates.
    pub tail_bound: Option<f64>,
}

impl PathConfig {
    /// Default barrier `x + 30 / mu_1` for positive drift, none otherwise.
    pub fn for_model(model: &OuModel, x: f64, seed: u64, n_paths: usize) -> PathConfig {
        let upper_barrier = (model.kappa > 0.0).then(|| default_barrier(model, x));
        PathConfig {
            horizon: 1e6,
            upper_barrier,
            seed,
            n_paths,
            tail_bound: None,
        }
    }
}

pub fn default_barrier(model: &OuModel, x: f64) -> f64 {
    x.max(0.0) + 30.0 / model.mus()[0]
}

/// Asymptotic value of `P^{barrier}(tau < infinity)` from the tail constant; `None` when
/// it cannot be computed (negative drift, or the solve fails).
pub fn barrier_tail_bound(model: &OuModel, level: f64, barrier: f64) -> Option<f64> {
    if model.kappa <= 0.0 || barrier <= 0.0 {
        return None;
    }
    let k = asymptotic_k(model, level, 1.0, &SolverOptions::default()).ok()?;
    let n = k.normalizer?;
    Some(k.constant.norm() * n.eval(barrier))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    JumpCross,
    ContinuousCross,
    Survived,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstPassageResult {
    pub outcome: Outcome,
    /// Crossing time, or the time survival was declared.
    pub tau: f64,
    /// `level - X_tau`; zero unless the crossing was by a jump.
    pub undershoot: f64,
}

/// Random stream for path `index` of a run seeded with `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Magnitude drawn from an exponential mixture.
///
/// Convex mixtures are sampled by composition. Otherwise the survival function is
/// inverted by bisection to within about `1e-18` in probability.
pub fn sample_magnitude<R: Rng + ?Sized>(mix: &ExpMixture, rng: &mut R) -> f64 {
    if mix.is_convex() {
        let u: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        let mut k = mix.len() - 1;
        for (i, w) in mix.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let e: f64 = rng.sample(Exp1);
        return e / mix.rates[k];
    }
    // Survival level in (0, 1]; 1 - gen() avoids zero.
    invert_survival(mix, 1.0 - rng.gen::<f64>())
}

/// The magnitude `m` with `P(M > m) = target`, by bisection.
pub fn invert_survival(mix: &ExpMixture, target: f64) -> f64 {
    let mut hi = 1.0 / mix.rates[0];
    while mix.survival(hi) > target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mix.survival(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// A signed jump: downward with probability `p`.
pub fn sample_jump<R: Rng + ?Sized>(model: &OuModel, rng: &mut R) -> f64 {
    if rng.gen::<f64>() < model.p {
        -sample_magnitude(&model.down, rng)
    } else {
        sample_magnitude(&model.up, rng)
    }
}

/// Simulate one path from `x` until it reaches `(-infinity, level]`.
pub fn simulate_first_passage<R: Rng + ?Sized>(
    model: &OuModel,
    x: f64,
    level: f64,
    config: &PathConfig,
    rng: &mut R,
) -> FirstPassageResult {
    let kappa = model.kappa;
    let barrier = if kappa > 0.0 {
        config.upper_barrier
    } else {
        None
    };
    let mut state = x;
    let mut t = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        let wait = e / model.lambda;
        // Creeping: X e^{kappa s} = level has a positive root only when level / X > 0.
        let ratio = level / state;
        if ratio > 0.0 {
            let hit = ratio.ln() / kappa;
            if hit > 0.0 && hit <= wait && t + hit <= config.horizon {
                return FirstPassageResult {
                    outcome: Outcome::ContinuousCross,
                    tau: t + hit,
                    undershoot: 0.0,
                };
            }
        }
        if t + wait > config.horizon {
            return FirstPassageResult {
                outcome: Outcome::Survived,
                tau: config.horizon,
                undershoot: 0.0,
            };
        }
        let flowed = state * (kappa * wait).exp();
        if let Some(b) = barrier {
            if flowed >= b {
                let tb = t + (b / state).ln() / kappa;
                return FirstPassageResult {
                    outcome: Outcome::Survived,
                    tau: tb,
                    undershoot: 0.0,
                };
            }
        }
        t += wait;
        state = flowed + sample_jump(model, rng);
        if state <= level {
            return FirstPassageResult {
                outcome: Outcome::JumpCross,
                tau: t,
                undershoot: level - state,
            };
        }
        if let Some(b) = barrier {
            if state >= b {
                return FirstPassageResult {
                    outcome: Outcome::Survived,
                    tau: t,
                    undershoot: 0.0,
                };
            }
        }
    }
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    /// Possible downward bias from declaring survival at the barrier.
    pub truncation_note: Option<f64>,
}

impl Estimate {
    fn from_sums(sum: f64, sum_sq: f64, n: usize, truncation_note: Option<f64>) -> Estimate {
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / nf).sqrt(),
            n,
            truncation_note,
        }
    }

    /// `|mean - value| <= k stderr + bias`, with the truncation note as the bias.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr + self.truncation_note.unwrap_or(0.0)
    }
}

/// Running sums over a batch of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    pub n: usize,
    pub jump: usize,
    pub continuous: usize,
    pub survived: usize,
    /// Per Laplace argument: sum and sum of squares of `e^{-zeta Z} 1{jump}`.
    pub laplace: Vec<(f64, f64)>,
}

impl Tally {
    fn new(k: usize) -> Tally {
        Tally {
            n: 0,
            jump: 0,
            continuous: 0,
            survived: 0,
            laplace: vec![(0.0, 0.0); k],
        }
    }

    fn add(&mut self, r: &FirstPassageResult, zetas: &[f64]) {
        self.n += 1;
        match r.outcome {
            Outcome::JumpCross => {
                self.jump += 1;
                for (acc, z) in self.laplace.iter_mut().zip(zetas) {
                    let v = (-z * r.undershoot).exp();
                    acc.0 += v;
                    acc.1 += v * v;
                }
            }
            Outcome::ContinuousCross => self.continuous += 1,
            Outcome::Survived => self.survived += 1,
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.n += other.n;
        self.jump += other.jump;
        self.continuous += other.continuous;
        self.survived += other.survived;
        for (a, b) in self.laplace.iter_mut().zip(&other.laplace) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }

    fn fraction(&self, count: usize, note: Option<f64>) -> Estimate {
        let c = count as f64;
        Estimate::from_sums(c, c, self.n, note)
    }
}

const CHUNK: usize = 4096;

fn run_chunk(
    model: &OuModel,
    x: f64,
    level: f64,
    config: &PathConfig,
    zetas: &[f64],
    chunk: usize,
) -> Tally {
    let mut tally = Tally::new(zetas.len());
    let start = chunk * CHUNK;
    let end = (start + CHUNK).min(config.n_paths);
    for i in start..end {
        let mut rng = path_rng(config.seed, i as u64);
        let r = simulate_first_passage(model, x, level, config, &mut rng);
        tally.add(&r, zetas);
    }
    tally
}

/// Simulate `config.n_paths` paths and accumulate outcomes and undershoot transforms.
///
/// Chunks are reduced in index order, so the result is bitwise reproducible for a
/// given seed with or without threads.
pub fn simulate_tally(
    model: &OuModel,
    x: f64,
    level: f64,
    config: &PathConfig,
    zetas: &[f64],
) -> Tally {
    let chunks = config.n_paths.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    let parts: Vec<Tally> = {
        use rayon::prelude::*;
        (0..chunks)
            .into_par_iter()
            .map(|c| run_chunk(model, x, level, config, zetas, c))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Tally> = (0..chunks)
        .map(|c| run_chunk(model, x, level, config, zetas, c))
        .collect();
    let mut total = Tally::new(zetas.len());
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Individual path results, in path order.
pub fn simulate_paths(
    model: &OuModel,
    x: f64,
    level: f64,
    config: &PathConfig,
) -> Vec<FirstPassageResult> {
    let run = |i: usize| {
        let mut rng = path_rng(config.seed, i as u64);
        simulate_first_passage(model, x, level, config, &mut rng)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..config.n_paths).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..config.n_paths).map(run).collect()
    }
}

fn note(model: &OuModel, config: &PathConfig) -> Option<f64> {
    if model.kappa > 0.0 {
        config.tail_bound
    } else {
        None
    }
}

/// Fraction of paths crossing the level.
pub fn estimate_ruin(model: &OuModel, x: f64, level: f64, config: &PathConfig) -> Estimate {
    let t = simulate_tally(model, x, level, config, &[]);
    t.fraction(t.jump + t.continuous, note(model, config))
}

/// Monte Carlo counterparts of the analytic transforms at one Laplace argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceEstimate {
    /// `E[e^{-zeta Z}; A_j]`.
    pub jump: Estimate,
    /// `P(A_c)`.
    pub continuous: Estimate,
    /// `P(A_j)`.
    pub jump_probability: Estimate,
    /// `P(tau < infinity)`.
    pub ruin: Estimate,
}

/// Estimates for each Laplace argument in `zetas`, from one common set of paths.
pub fn estimate_laplace_grid(
    model: &OuModel,
    x: f64,
    level: f64,
    zetas: &[f64],
    config: &PathConfig,
) -> Vec<LaplaceEstimate> {
    let t = simulate_tally(model, x, level, config, zetas);
    let nt = note(model, config);
    t.laplace
        .iter()
        .map(|&(s, s2)| LaplaceEstimate {
            jump: Estimate::from_sums(s, s2, t.n, nt),
            continuous: t.fraction(t.continuous, nt),
            jump_probability: t.fraction(t.jump, nt),
            ruin: t.fraction(t.jump + t.continuous, nt),
        })
        .collect()
}

pub fn estimate_laplace(
    model: &OuModel,
    x: f64,
    level: f64,
    zeta: f64,
    config: &PathConfig,
) -> LaplaceEstimate {
    estimate_laplace_grid(model, x, level, &[zeta], config)[0]
}

/// Kolmogorov-Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v: Vec<f64> = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = cdf(s);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of the one-sample KS statistic at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}
