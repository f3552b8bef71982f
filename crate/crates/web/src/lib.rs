//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a flat `Float64Array` so the page needs no glue
//! beyond the generated bindings. The `*_native` twins carry the logic and
//! are what the tests call.

use debias_core::debias::Debiased;
use debias_core::inference::VarianceKind;
use debias_core::model::{normalize_direction, CovarianceSpec, RegressionInstance, Truth};
use debias_core::penalty::{fit_with, FitOptions, Penalty};
use debias_core::{rng, stein, Error, Result};
use nalgebra::DVector;
use wasm_bindgen::prelude::*;

/// Fields per row returned by [`ci_path`].
pub const CI_PATH_STRIDE: usize = 7;

fn check_dims(n: usize, p: usize, s: usize) -> Result<()> {
    if n < 2 || p < 1 || s > p || n * p > 400_000 {
        return Err(Error::InvalidInput(format!("unsupported size n={n}, p={p}, s={s}")));
    }
    Ok(())
}

/// Identity design, first `s` coefficients equal to one.
fn sparse_instance(n: usize, p: usize, s: usize, sigma: f64, rng: &mut impl rand::Rng) -> Result<RegressionInstance> {
    check_dims(n, p, s)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidInput("sigma must be positive".into()));
    }
    let beta = DVector::from_fn(p, |i, _| if i < s { 1.0 } else { 0.0 });
    let truth = Truth { beta, sigma, cov: CovarianceSpec::identity(p) };
    Ok(RegressionInstance::simulate(truth, n, rng))
}

fn e1(p: usize) -> DVector<f64> {
    let mut a = DVector::zeros(p);
    a[0] = 1.0;
    a
}

/// One dataset, Lasso fits down the grid `lambdas` (warm started from the
/// largest). Rows are `[lambda, df, theta_hat, lo, hi, quadratic_valid, theta]`
/// for θ = β₁, using the quadratic interval or the spike interval when the
/// former is unbounded. Rows whose correction is degenerate hold NaN.
pub fn ci_path_native(
    n: usize,
    p: usize,
    s: usize,
    sigma: f64,
    lambdas: &[f64],
    alpha: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let inst = sparse_instance(n, p, s, sigma, &mut rng::rng(seed))?;
    let dir = normalize_direction(&e1(p), &CovarianceSpec::identity(p), &inst.x)?;
    let theta = dir.a0.dot(&inst.truth.as_ref().expect("simulated").beta);
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut out = vec![f64::NAN; lambdas.len() * CI_PATH_STRIDE];
    let mut warm: Option<DVector<f64>> = None;
    for k in order {
        let pen = Penalty::Lasso { lambda: lambdas[k] };
        let fit = fit_with(&inst, &pen, FitOptions::default(), warm.as_ref())?;
        let row = &mut out[k * CI_PATH_STRIDE..(k + 1) * CI_PATH_STRIDE];
        row[0] = lambdas[k];
        row[6] = theta;
        let db = Debiased::new(&inst, &fit, &pen)?;
        row[1] = db.df;
        if let (Ok(th), Ok(q)) = (db.theta_hat(&dir), db.ci_quadratic(&dir, alpha)) {
            let ci = if q.valid { q.clone() } else { db.ci_spike(&dir, alpha)? };
            row[2] = th;
            row[3] = ci.lo;
            row[4] = ci.hi;
            row[5] = if q.valid { 1.0 } else { 0.0 };
        }
        warm = Some(fit.beta_hat);
    }
    Ok(out)
}

/// Pivots of θ = β₁ over `reps` fresh datasets, interleaved as
/// `[resid, vhat, resid, vhat, ...]`. Degenerate replications are skipped.
pub fn pivots_native(
    n: usize,
    p: usize,
    s: usize,
    sigma: f64,
    lambda: f64,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_dims(n, p, s)?;
    if reps == 0 || reps > 5000 {
        return Err(Error::InvalidInput(format!("reps must be in 1..=5000, got {reps}")));
    }
    let pen = Penalty::Lasso { lambda };
    let mut out = Vec::with_capacity(2 * reps);
    for rep in 0..reps {
        let inst = sparse_instance(n, p, s, sigma, &mut rng::child_rng(seed, rep as u64))?;
        let dir = normalize_direction(&e1(p), &CovarianceSpec::identity(p), &inst.x)?;
        let fit = fit_with(&inst, &pen, FitOptions::default(), None)?;
        let db = Debiased::new(&inst, &fit, &pen)?;
        let theta = dir.a0.dot(&inst.truth.as_ref().expect("simulated").beta);
        if let (Ok(a), Ok(b)) = (db.pivot(&dir, theta, VarianceKind::Resid), db.pivot(&dir, theta, VarianceKind::Vhat))
        {
            out.push(a);
            out.push(b);
        }
    }
    Ok(out)
}

/// `[lhs, rhs, z_score, mean_xi, mean_xi_se]` of the second-order Stein check.
pub fn stein_native(name: &str, n: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || n > 400 || reps > 200_000 {
        return Err(Error::InvalidInput(format!("unsupported size n={n}, reps={reps}")));
    }
    let f = stein::registry_function(name, n, seed)?;
    let c = stein::second_order_stein_check(f.as_ref(), reps, seed.wrapping_add(1))?;
    Ok(vec![c.lhs, c.rhs, c.z_score, c.mean_xi, c.mean_xi_se])
}

fn js(r: Result<Vec<f64>>) -> std::result::Result<Vec<f64>, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn ci_path(
    n: usize,
    p: usize,
    s: usize,
    sigma: f64,
    lambdas: Vec<f64>,
    alpha: f64,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsValue> {
    js(ci_path_native(n, p, s, sigma, &lambdas, alpha, seed))
}

#[wasm_bindgen]
pub fn pivots(
    n: usize,
    p: usize,
    s: usize,
    sigma: f64,
    lambda: f64,
    reps: usize,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsValue> {
    js(pivots_native(n, p, s, sigma, lambda, reps, seed))
}

#[wasm_bindgen]
pub fn stein_check(name: &str, n: usize, reps: usize, seed: u64) -> std::result::Result<Vec<f64>, JsValue> {
    js(stein_native(name, n, reps, seed))
}

/// Names accepted by [`stein_check`], comma separated.
#[wasm_bindgen]
pub fn stein_functions() -> String {
    stein::REGISTRY.join(",")
}
