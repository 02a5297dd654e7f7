//! Adaptive tanh-sinh quadrature on the unit interval.
//!
//! Integrands receive both `s` and `1 - s`, each computed without cancellation,
//! so that endpoint singularities can be evaluated at tiny distances.

use num_complex::Complex64;
use std::f64::consts::FRAC_PI_2;

/// Stopping rules for [`integrate_unit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRule {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub min_level: usize,
    pub max_level: usize,
    pub max_subdivisions: usize,
}

impl Default for UnitRule {
    fn default() -> Self {
        UnitRule {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            min_level: 3,
            max_level: 8,
            max_subdivisions: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitResult {
    pub value: Complex64,
    pub error: f64,
    pub evaluations: usize,
    pub converged: bool,
}

pub(crate) const T_MAX: f64 = 6.5;
const TAIL_CUT: f64 = 1e-18;

/// One abscissa of the rule: distance from the nearer endpoint (as a fraction of the
/// half-width) and the weight.
#[inline]
pub(crate) fn node(t: f64) -> (f64, f64) {
    let u = FRAC_PI_2 * t.sinh();
    let ch = u.cosh();
    let delta = (-u).exp() / ch;
    let w = FRAC_PI_2 * t.cosh() / (ch * ch);
    (delta, w)
}

struct Interval {
    a: f64,
    b: f64,
    oma: f64,
    omb: f64,
}

fn level_sum<F: FnMut(f64, f64) -> Complex64>(
    f: &mut F,
    iv: &Interval,
    h: f64,
    odd_only: bool,
    scale: f64,
    evals: &mut usize,
) -> Complex64 {
    let half = 0.5 * (iv.b - iv.a);
    let mut sum = Complex64::new(0.0, 0.0);
    if !odd_only {
        let c = iv.a + half;
        sum += f(c, iv.oma - half) * FRAC_PI_2;
        *evals += 1;
    }
    let step = if odd_only { 2 } else { 1 };
    let start = 1;
    for side in [1.0f64, -1.0] {
        let mut k = start;
        let mut small = 0;
        loop {
            let t = k as f64 * h;
            if t > T_MAX {
                break;
            }
            let (delta, w) = node(t);
            let off = half * delta;
            if off < 1e-300 {
                break;
            }
            let (s, oms) = if side > 0.0 {
                (iv.b - off, iv.omb + off)
            } else {
                (iv.a + off, iv.oma - off)
            };
            let v = f(s, oms);
            *evals += 1;
            let term = v * w;
            sum += term;
            let mag = term.norm();
            if mag <= TAIL_CUT * (scale + sum.norm()) {
                small += 1;
                if small >= 2 {
                    break;
                }
            } else {
                small = 0;
            }
            k += step;
        }
    }
    sum * half
}

fn single<F: FnMut(f64, f64) -> Complex64>(
    f: &mut F,
    iv: &Interval,
    rule: &UnitRule,
    abs_tol: f64,
    evals: &mut usize,
) -> (Complex64, f64, bool) {
    let mut h = 1.0;
    let mut raw = level_sum(f, iv, h, false, 0.0, evals);
    let mut est = raw * h;
    let mut prev = est;
    let mut err = f64::INFINITY;
    for level in 1..=rule.max_level {
        h *= 0.5;
        let half = 0.5 * (iv.b - iv.a);
        let scale = raw.norm() / half;
        raw += level_sum(f, iv, h, true, scale, evals);
        est = raw * h;
        err = (est - prev).norm();
        if !est.re.is_finite() || !est.im.is_finite() {
            return (est, f64::INFINITY, false);
        }
        if level >= rule.min_level && err <= (rule.rel_tol * est.norm()).max(abs_tol) {
            return (est, err, true);
        }
        prev = est;
    }
    (est, err, false)
}

/// Integrate `f(s, 1 - s)` over `s in [0, 1]`.
pub fn integrate_unit<F: FnMut(f64, f64) -> Complex64>(f: &mut F, rule: &UnitRule) -> UnitResult {
    let mut evals = 0;
    let mut stack = vec![(
        Interval {
            a: 0.0,
            b: 1.0,
            oma: 1.0,
            omb: 0.0,
        },
        rule.abs_tol,
    )];
    let mut total = Complex64::new(0.0, 0.0);
    let mut total_err = 0.0;
    let mut converged = true;
    let mut splits = 0;
    while let Some((iv, atol)) = stack.pop() {
        let (v, e, ok) = single(f, &iv, rule, atol, &mut evals);
        if ok || splits >= rule.max_subdivisions {
            total += v;
            total_err += e;
            converged &= ok;
            continue;
        }
        splits += 1;
        let mid = 0.5 * (iv.a + iv.b);
        let om_mid = if mid <= 0.5 {
            1.0 - mid
        } else {
            iv.omb + (iv.b - mid)
        };
        stack.push((
            Interval {
                a: iv.a,
                b: mid,
                oma: iv.oma,
                omb: om_mid,
            },
            0.5 * atol,
        ));
        stack.push((
            Interval {
                a: mid,
                b: iv.b,
                oma: om_mid,
                omb: iv.omb,
            },
            0.5 * atol,
        ));
    }
    UnitResult {
        value: total,
        error: total_err,
        evaluations: evals,
        converged,
    }
}

/// Substitution power that tames an endpoint singularity `s^e`: nearly non-integrable
/// powers `-1 < e < -1/2` become `u^{-1/2}` under `s = u^m`.
pub fn grading_power(e: f64) -> f64 {
    if e > -1.0 && e < -0.5 {
        0.5 / (1.0 + e)
    } else {
        1.0
    }
}

/// Integrate a real-variable complex function over `[a, b]`, either bound possibly infinite.
///
/// Infinite tails use `x = a + scale * s / (1 - s)`.
pub fn integrate_interval<F: FnMut(f64) -> Complex64>(
    mut f: F,
    a: f64,
    b: f64,
    scale: f64,
    rule: &UnitRule,
) -> UnitResult {
    interval_dyn(&mut f, a, b, scale, rule)
}

fn interval_dyn(
    f: &mut dyn FnMut(f64) -> Complex64,
    a: f64,
    b: f64,
    scale: f64,
    rule: &UnitRule,
) -> UnitResult {
    assert!(a < b);
    match (a.is_finite(), b.is_finite()) {
        (true, true) => {
            let len = b - a;
            integrate_unit(
                &mut |s, oms| {
                    let x = if s <= 0.5 { a + len * s } else { b - len * oms };
                    f(x) * len
                },
                rule,
            )
        }
        (true, false) => integrate_unit(
            &mut |s, oms| {
                if oms <= 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let t = scale * s / oms;
                if !t.is_finite() {
                    return Complex64::new(0.0, 0.0);
                }
                f(a + t) * (scale / (oms * oms))
            },
            rule,
        ),
        (false, true) => integrate_unit(
            &mut |s, oms| {
                if oms <= 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let t = scale * s / oms;
                if !t.is_finite() {
                    return Complex64::new(0.0, 0.0);
                }
                f(b - t) * (scale / (oms * oms))
            },
            rule,
        ),
        (false, false) => {
            let mut r1 = interval_dyn(f, f64::NEG_INFINITY, 0.0, scale, rule);
            let r2 = interval_dyn(f, 0.0, f64::INFINITY, scale, rule);
            r1.value += r2.value;
            r1.error += r2.error;
            r1.evaluations += r2.evaluations;
            r1.converged &= r2.converged;
            r1
        }
    }
}
