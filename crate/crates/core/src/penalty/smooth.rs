//! Ridge (direct solve) and damped Newton for twice-differentiable penalties.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{FitOptions, RawFit, SmoothPenalty, SmoothPenaltyFn};
use crate::error::{Error, Result};
use crate::model::RegressionInstance;
use crate::rng;

/// `(XᵀX + nμI) β = Xᵀy`, solved in whichever of the primal (p x p) or dual
/// (n x n) forms is smaller.
pub(crate) fn solve_ridge(instance: &RegressionInstance, mu: f64) -> Result<RawFit> {
    let x = &instance.x;
    let (n, p) = x.shape();
    let shift = n as f64 * mu;
    let beta = if p <= n {
        let mut a = x.tr_mul(x);
        for i in 0..p {
            a[(i, i)] += shift;
        }
        let chol = a.cholesky().ok_or(Error::NotPositiveDefinite)?;
        chol.solve(&x.tr_mul(&instance.y))
    } else {
        let mut a = x * x.transpose();
        for i in 0..n {
            a[(i, i)] += shift;
        }
        let chol = a.cholesky().ok_or(Error::NotPositiveDefinite)?;
        x.tr_mul(&chol.solve(&instance.y))
    };
    let r = &instance.y - x * &beta;
    let obj = r.norm_squared() / (2.0 * n as f64) + 0.5 * mu * beta.norm_squared();
    Ok(RawFit { beta, iterations: 1, trace: vec![obj] })
}

pub(crate) fn solve_newton(
    instance: &RegressionInstance,
    pen: &SmoothPenalty,
    opts: FitOptions,
    init: Option<&DVector<f64>>,
) -> Result<RawFit> {
    let x = &instance.x;
    let n = instance.n() as f64;
    let gram = x.tr_mul(x) / n;
    let xty = x.tr_mul(&instance.y) / n;
    let g = pen.func.as_ref();
    let objective = |b: &DVector<f64>| (&instance.y - x * b).norm_squared() / (2.0 * n) + g.value(b);

    let mut b = init.cloned().unwrap_or_else(|| DVector::zeros(instance.p()));
    let mut obj = objective(&b);
    let mut trace = vec![obj];
    let mut violation = f64::INFINITY;
    for it in 0..opts.max_iter {
        let grad = &gram * &b - &xty + g.gradient(&b);
        violation = grad.amax();
        if violation <= opts.tol {
            return Ok(RawFit { beta: b, iterations: it, trace });
        }
        let hess = &gram + g.hessian(&b);
        let dir = match hess.cholesky() {
            Some(chol) => -chol.solve(&grad),
            None => -grad.clone(),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &b + &dir * t;
            let c = objective(&cand);
            // Near the optimum objective differences drop below rounding;
            // then a step that shrinks the gradient is taken instead.
            let flat = c <= obj + 1e-14 * obj.abs() && (&gram * &cand - &xty + g.gradient(&cand)).amax() < violation;
            if c < obj || flat {
                b = cand;
                obj = c;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        trace.push(obj);
        if !moved {
            // No decrease is representable any more; report where we stand.
            let grad = &gram * &b - &xty + g.gradient(&b);
            violation = grad.amax();
            if violation <= opts.tol {
                return Ok(RawFit { beta: b, iterations: it + 1, trace });
            }
            return Err(Error::NotConverged { beta: b, violation, iterations: it + 1 });
        }
    }
    Err(Error::NotConverged { beta: b, violation, iterations: opts.max_iter })
}

/// Compares the supplied gradient and Hessian with central differences of
/// the value and gradient at a random point; relative tolerance 1e-4.
pub fn check_smooth_consistency(g: &dyn SmoothPenaltyFn, p: usize, seed: u64) -> Result<()> {
    let mut r = rng::rng(seed);
    let b = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
    let h = 1e-5;
    let grad = g.gradient(&b);
    let hess = g.hessian(&b);
    if grad.len() != p || hess.shape() != (p, p) {
        return Err(Error::Dimension("smooth penalty callables return wrong shapes".into()));
    }
    let mut fd_grad = DVector::zeros(p);
    let mut fd_hess = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut bp = b.clone();
        let mut bm = b.clone();
        bp[j] += h;
        bm[j] -= h;
        fd_grad[j] = (g.value(&bp) - g.value(&bm)) / (2.0 * h);
        fd_hess.set_column(j, &((g.gradient(&bp) - g.gradient(&bm)) / (2.0 * h)));
    }
    let rel = |a: f64, scale: f64| a / scale.max(1.0);
    let eg = rel((&grad - &fd_grad).amax(), grad.amax());
    let eh = rel((&hess - &fd_hess).amax(), hess.amax());
    if eg > 1e-4 || eh > 1e-4 {
        return Err(Error::InvalidInput(format!(
            "smooth penalty derivatives disagree with finite differences (gradient {eg:e}, hessian {eh:e})"
        )));
    }
    Ok(())
}

/// `g(b) = λδ Σ log cosh(bⱼ/δ) + (μ/2)‖b‖²`: a smoothed ℓ₁ penalty.
#[derive(Debug, Clone, Copy)]
pub struct LogCosh {
    pub lambda: f64,
    pub delta: f64,
    pub mu: f64,
}

impl LogCosh {
    pub fn penalty(self) -> super::Penalty {
        super::Penalty::Smooth(SmoothPenalty { func: std::sync::Arc::new(self), strong_convexity: self.mu })
    }
}

fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl SmoothPenaltyFn for LogCosh {
    fn value(&self, b: &DVector<f64>) -> f64 {
        self.lambda * self.delta * b.iter().map(|&v| log_cosh(v / self.delta)).sum::<f64>()
            + 0.5 * self.mu * b.norm_squared()
    }

    fn gradient(&self, b: &DVector<f64>) -> DVector<f64> {
        b.map(|v| self.lambda * (v / self.delta).tanh() + self.mu * v)
    }

    fn hessian(&self, b: &DVector<f64>) -> DMatrix<f64> {
        let d = b.map(|v| {
            let c = (v / self.delta).cosh();
            self.lambda / (self.delta * c * c) + self.mu
        });
        DMatrix::from_diagonal(&d)
    }
}
