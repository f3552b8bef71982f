//! Noiseless oracle β* = argmin_b ½‖Σ^{1/2}(β − b)‖² + g(b).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::CovarianceSpec;
use crate::penalty::{group_norm, Penalty};

pub const MAX_ITER: usize = 100_000;

#[derive(Debug, Clone)]
pub struct Oracle {
    pub beta_star: DVector<f64>,
    /// σ² + ‖Σ^{1/2}(β* − β)‖².
    pub r_star: f64,
    pub iterations: usize,
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// prox of t·g at v; `None` for smooth penalties.
fn prox(pen: &Penalty, v: &DVector<f64>, t: f64) -> Option<DVector<f64>> {
    Some(match pen {
        Penalty::Lasso { lambda } => v.map(|x| soft(x, t * lambda)),
        Penalty::ElasticNet { lambda, mu } => v.map(|x| soft(x, t * lambda) / (1.0 + t * mu)),
        Penalty::Ridge { mu } => v / (1.0 + t * mu),
        Penalty::GroupLasso { groups, lambdas } => {
            let mut out = v.clone();
            for (k, g) in groups.iter().enumerate() {
                let norm = group_norm(v, g);
                let scale = if norm > 0.0 { (1.0 - t * lambdas[k] / norm).max(0.0) } else { 0.0 };
                for &j in g {
                    out[j] *= scale;
                }
            }
            out
        }
        Penalty::Smooth(_) => return None,
    })
}

pub fn oracle_beta_star(
    beta: &DVector<f64>,
    cov: &CovarianceSpec,
    sigma: f64,
    pen: &Penalty,
    tol: f64,
) -> Result<Oracle> {
    pen.validate(beta.len())?;
    let sig = cov.matrix();
    let (b, iterations) = match pen {
        Penalty::Smooth(s) => newton(beta, sig, s.func.as_ref(), tol)?,
        _ => fista(beta, sig, cov.operator_norm(), pen, tol)?,
    };
    let r_star = sigma * sigma + cov.quad_form(&(&b - beta));
    Ok(Oracle { beta_star: b, r_star, iterations })
}

fn fista(beta: &DVector<f64>, sig: &DMatrix<f64>, l: f64, pen: &Penalty, tol: f64) -> Result<(DVector<f64>, usize)> {
    let t = 1.0 / l;
    let mut b = beta.clone();
    let mut y = b.clone();
    let mut mom = 1.0f64;
    for it in 1..=MAX_ITER {
        let grad = sig * (&y - beta);
        let next = prox(pen, &(&y - grad * t), t).expect("nonsmooth penalty");
        let step = &y - &next;
        // gradient mapping L(y − b⁺)
        if step.amax() * l <= tol {
            return Ok((next, it));
        }
        let restart = step.dot(&(&next - &b)) > 0.0;
        let mom_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * mom * mom).sqrt()) };
        y = if restart { next.clone() } else { &next + (&next - &b) * ((mom - 1.0) / mom_next) };
        mom = mom_next;
        b = next;
    }
    Err(Error::NotConverged { beta: b, violation: f64::NAN, iterations: MAX_ITER })
}

fn newton(
    beta: &DVector<f64>,
    sig: &DMatrix<f64>,
    g: &dyn crate::penalty::SmoothPenaltyFn,
    tol: f64,
) -> Result<(DVector<f64>, usize)> {
    let obj = |b: &DVector<f64>| 0.5 * (b - beta).dot(&(sig * (b - beta))) + g.value(b);
    let mut b = beta.clone();
    for it in 1..=MAX_ITER.min(1000) {
        let grad = sig * (&b - beta) + g.gradient(&b);
        if grad.amax() <= tol {
            return Ok((b, it));
        }
        let hess = sig + g.hessian(&b);
        let dir = hess.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
        let f0 = obj(&b);
        let mut step = 1.0;
        loop {
            let cand = &b - &dir * step;
            if obj(&cand) <= f0 + 1e-14 * f0.abs() || step < 1e-12 {
                b = cand;
                break;
            }
            step *= 0.5;
        }
    }
    let v = (sig * (&b - beta) + g.gradient(&b)).amax();
    Err(Error::NotConverged { beta: b, violation: v, iterations: 1000 })
}
