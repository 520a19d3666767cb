//! Browser demo bindings. Each exported function has a plain Rust twin that
//! returns `Result<_, String>` so it can be tested natively; the
//! `#[wasm_bindgen]` wrappers only convert the error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use wasm_bindgen::prelude::*;

use qsim::abfp::{abfp_qdq, AbfpConfig};
use qsim::calibration::{calibrate_mse_with, qdq_mse, DEFAULT_GRID_SIZE};
use qsim::quant::{qdq, Granularity, Orientation, QuantSpec, ScaleSet, SignedMode};
use qsim::{enumerate, round_to_format, NumericFormat, Tensor};

fn parse(format: &str) -> Result<NumericFormat, String> {
    format.parse().map_err(|e: qsim::QsimError| e.to_string())
}

fn heavy_tailed(len: usize, dof: f64, seed: u64) -> Result<Vec<f64>, String> {
    let t = StudentT::new(dof).map_err(|e| format!("bad tail parameter {dof}: {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| t.sample(&mut rng)).collect())
}

/// Every representable value of `format`, ascending.
pub fn format_values(format: &str) -> Result<Vec<f64>, String> {
    enumerate(&parse(format)?).map(|t| t.values).map_err(|e| e.to_string())
}

/// `points` evenly spaced inputs over `[lo, hi]` interleaved with their
/// rounded values: `[x0, r0, x1, r1, ...]`.
pub fn rounding_curve(format: &str, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, String> {
    let f = parse(format)?;
    if points < 2 || !(lo < hi) {
        return Err("need at least 2 points and lo < hi".into());
    }
    let mut out = Vec::with_capacity(points * 2);
    for i in 0..points {
        let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        out.push(x);
        out.push(round_to_format(x, &f));
    }
    Ok(out)
}

/// Squared error of per-tensor abs-max QDQ against ABFP on a seeded
/// heavy-tailed `rows x cols` matrix. Returns
/// `[per_tensor_sse, abfp_sse, absmax, abfp_sse per column...]`.
pub fn abfp_compare(rows: usize, cols: usize, n: usize, format: &str, dof: f64, seed: u64) -> Result<Vec<f64>, String> {
    let f = parse(format)?;
    let data = heavy_tailed(rows * cols, dof, seed)?;
    let t = Tensor::matrix(rows, cols, data).map_err(|e| e.to_string())?;
    let absmax = t.abs_max();
    let scales = ScaleSet::from_alphas(Granularity::PerTensor, vec![absmax], &f, SignedMode::Symmetric)
        .map_err(|e| e.to_string())?;
    let per_tensor = qdq(&t, &QuantSpec::per_tensor(f), &scales).map_err(|e| e.to_string())?;
    let abfp = abfp_qdq(&t, &AbfpConfig::new(n, Orientation::Columns, f)).map_err(|e| e.to_string())?;
    let sse = |q: &Tensor| q.sum_squared_diff(&t).map_err(|e| e.to_string());
    let mut out = vec![sse(&per_tensor)?, sse(&abfp)?, absmax];
    for c in 0..cols {
        let col: f64 = (0..rows)
            .map(|r| {
                let i = r * cols + c;
                (abfp.data()[i] - t.data()[i]).powi(2)
            })
            .sum();
        out.push(col);
    }
    Ok(out)
}

/// MSE-versus-threshold curve on seeded heavy-tailed samples. Returns
/// `[chosen_alpha, absmax, a0, mse0, a1, mse1, ...]`.
pub fn mse_curve(format: &str, samples: usize, dof: f64, seed: u64, points: usize) -> Result<Vec<f64>, String> {
    let f = parse(format)?;
    if samples == 0 || points < 2 {
        return Err("need samples > 0 and at least 2 points".into());
    }
    let x = heavy_tailed(samples, dof, seed)?;
    let absmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chosen = calibrate_mse_with(&x, &f, SignedMode::Symmetric, DEFAULT_GRID_SIZE).map_err(|e| e.to_string())?;
    let mut out = vec![chosen, absmax];
    for k in 1..=points {
        let a = absmax * k as f64 / points as f64;
        out.push(a);
        out.push(qdq_mse(&x, a, &f, SignedMode::Symmetric));
    }
    Ok(out)
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = formatValues)]
pub fn format_values_js(format: &str) -> Result<Vec<f64>, JsError> {
    js(format_values(format))
}

#[wasm_bindgen(js_name = roundingCurve)]
pub fn rounding_curve_js(format: &str, lo: f64, hi: f64, points: usize) -> Result<Vec<f64>, JsError> {
    js(rounding_curve(format, lo, hi, points))
}

#[wasm_bindgen(js_name = abfpCompare)]
pub fn abfp_compare_js(
    rows: usize,
    cols: usize,
    n: usize,
    format: &str,
    dof: f64,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    js(abfp_compare(rows, cols, n, format, dof, seed))
}

#[wasm_bindgen(js_name = mseCurve)]
pub fn mse_curve_js(format: &str, samples: usize, dof: f64, seed: u64, points: usize) -> Result<Vec<f64>, JsError> {
    js(mse_curve(format, samples, dof, seed, points))
}
