//! Browser bindings: three curves computed from a model given as JSON.
//!
//! Every exported function takes the model in the same shape as the `[model]` table of a
//! run file and returns a JSON document `{"x": [...], "series": {...}}`. The plain Rust
//! functions underneath are what the tests exercise.

use ouruin::eigensystem::SolverOptions;
use ouruin::model::{reference_model, validate_model, ModelParams, OuModel};
use ouruin::ruin::{FirstPassage, LevelLimit};
use serde::Serialize;
use std::collections::BTreeMap;
use wasm_bindgen::prelude::*;

/// A sampled curve, possibly with several named series over the same abscissae.
#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub series: BTreeMap<String, Vec<f64>>,
}

fn parse_model(json: &str) -> Result<OuModel, String> {
    let params: ModelParams = serde_json::from_str(json).map_err(|e| e.to_string())?;
    validate_model(&params).map_err(|e| e.to_string())
}

fn grid(from: f64, to: f64, n: usize) -> Result<Vec<f64>, String> {
    if n < 2 || !(from.is_finite() && to.is_finite()) || from >= to {
        return Err(format!("bad grid [{from}, {to}] with {n} points"));
    }
    Ok((0..n)
        .map(|i| from + (to - from) * i as f64 / (n - 1) as f64)
        .collect())
}

/// Ruin probability against the start, with the jump and creeping parts when both exist.
pub fn ruin_vs_start(
    model: &OuModel,
    level: f64,
    from: f64,
    to: f64,
    n: usize,
) -> Result<Curve, String> {
    let xs = grid(from, to, n)?;
    let fp = FirstPassage::new(model, level, 0.0, &SolverOptions::default())
        .map_err(|e| e.to_string())?;
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &x in &xs {
        let out = fp.laplace(x).map_err(|e| e.to_string())?;
        let total = fp.ruin(x).map_err(|e| e.to_string())?;
        series.entry("ruin".into()).or_default().push(total.value);
        if let Some(c) = out.continuous {
            series
                .entry("jump".into())
                .or_default()
                .push(out.jump.value);
            series.entry("creep".into()).or_default().push(c.value);
        }
    }
    Ok(Curve { x: xs, series })
}

/// `E[e^{-zeta Z}; jump crossing]` against `zeta`, for a fixed start and level.
pub fn laplace_vs_zeta(
    model: &OuModel,
    start: f64,
    level: f64,
    to: f64,
    n: usize,
) -> Result<Curve, String> {
    let zetas = grid(0.0, to, n)?;
    let opts = SolverOptions::default();
    let mut values = Vec::with_capacity(n);
    for &zeta in &zetas {
        let fp = FirstPassage::new(model, level, zeta, &opts).map_err(|e| e.to_string())?;
        values.push(fp.laplace(start).map_err(|e| e.to_string())?.jump.value);
    }
    Ok(Curve {
        x: zetas,
        series: BTreeMap::from([("laplace".to_string(), values)]),
    })
}

/// Limit of the ruin probability as the level goes to minus infinity, against the start.
pub fn deep_level_limit(model: &OuModel, from: f64, to: f64, n: usize) -> Result<Curve, String> {
    let xs = grid(from, to, n)?;
    let limit = LevelLimit::new(model, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let values = xs
        .iter()
        .map(|&x| limit.eval(x).map(|v| v.re).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Curve {
        x: xs,
        series: BTreeMap::from([("limit".to_string(), values)]),
    })
}

fn to_js(curve: Result<Curve, String>) -> Result<String, JsError> {
    let curve = curve.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&curve).map_err(|e| JsError::new(&e.to_string()))
}

/// Parameters of the built-in example model, as JSON.
#[wasm_bindgen(js_name = referenceModel)]
pub fn reference_model_json() -> String {
    serde_json::to_string_pretty(&reference_model().params()).expect("plain numbers serialize")
}

#[wasm_bindgen(js_name = ruinCurve)]
pub fn ruin_curve(
    model: &str,
    level: f64,
    from: f64,
    to: f64,
    n: usize,
) -> Result<String, JsError> {
    to_js(parse_model(model).and_then(|m| ruin_vs_start(&m, level, from, to, n)))
}

#[wasm_bindgen(js_name = laplaceCurve)]
pub fn laplace_curve(
    model: &str,
    start: f64,
    level: f64,
    to: f64,
    n: usize,
) -> Result<String, JsError> {
    to_js(parse_model(model).and_then(|m| laplace_vs_zeta(&m, start, level, to, n)))
}

#[wasm_bindgen(js_name = limitCurve)]
pub fn limit_curve(model: &str, from: f64, to: f64, n: usize) -> Result<String, JsError> {
    to_js(parse_model(model).and_then(|m| deep_level_limit(&m, from, to, n)))
}
