//! wasm-bindgen exports for `www/index.html`.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// Squared distance to the optimum per iteration of one run.
#[wasm_bindgen]
pub fn trace(
    family: &str,
    n: usize,
    stepsize: f64,
    iters: usize,
    seed: u64,
) -> Result<Vec<f64>, JsValue> {
    demo::trace(family, n, stepsize, iters, seed).map_err(js)
}

/// Interleaved `det, min_eig` over the grid, x-major.
#[wasm_bindgen]
pub fn det_grid(z: f64, count: usize, lo: f64, hi: f64) -> Result<Vec<f64>, JsValue> {
    demo::det_grid(z, count, lo, hi).map_err(js)
}

#[wasm_bindgen]
pub fn small_sweep(
    n: usize,
    count: usize,
    tmax: usize,
    reps: usize,
    seed: u64,
) -> Result<String, JsValue> {
    demo::small_sweep(n, count, tmax, reps, seed).map_err(js)
}
