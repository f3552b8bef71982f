//! Cyclic coordinate descent for the Lasso and the elastic net.
//!
//! Sweeps alternate between the full coordinate set and the current support.
//! Once the support has been stable for a full sweep, the stationarity
//! equations on the support are solved directly; the candidate is kept only
//! if its signs agree with the iterate's, in which case it is the exact
//! minimizer over that orthant face and the objective cannot increase.

use nalgebra::{DMatrix, DVector};

use super::{FitOptions, RawFit};
use crate::error::{Error, Result};
use crate::model::RegressionInstance;

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

struct State<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    n: f64,
    lambda: f64,
    mu: f64,
    col_sq: Vec<f64>,
    beta: DVector<f64>,
    resid: DVector<f64>,
}

impl State<'_> {
    /// Exact minimization in coordinate `j`; returns |Δβⱼ|·‖Xⱼ‖²/n.
    fn update(&mut self, j: usize) -> f64 {
        let c = self.col_sq[j];
        if c == 0.0 {
            return 0.0;
        }
        let col = self.x.column(j);
        let old = self.beta[j];
        let z = col.dot(&self.resid) / self.n + c * old;
        let new = soft_threshold(z, self.lambda) / (c + self.mu);
        if new != old {
            self.resid.axpy(old - new, &col, 1.0);
            self.beta[j] = new;
        }
        (new - old).abs() * c
    }

    fn objective(&self) -> f64 {
        self.resid.norm_squared() / (2.0 * self.n)
            + self.lambda * self.beta.lp_norm(1)
            + 0.5 * self.mu * self.beta.norm_squared()
    }

    fn support(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect()
    }

    fn kkt(&self) -> f64 {
        let corr = self.x.tr_mul(&self.resid) / self.n;
        (0..self.beta.len())
            .map(|j| {
                let b = self.beta[j];
                if b != 0.0 {
                    (corr[j] - self.mu * b - self.lambda * b.signum()).abs()
                } else {
                    (corr[j].abs() - self.lambda).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Solves `(X_SᵀX_S + nμI) b_S = X_Sᵀy − nλ sgn(β_S)` and adopts the
    /// result when the signs are preserved.
    fn polish(&mut self, support: &[usize]) -> bool {
        let k = support.len();
        if k == 0 || k > self.x.nrows() && self.mu == 0.0 {
            return false;
        }
        let xs = self.x.select_columns(support);
        let mut gram = xs.tr_mul(&xs);
        for i in 0..k {
            gram[(i, i)] += self.n * self.mu;
        }
        let mut rhs = xs.tr_mul(self.y);
        for (i, &j) in support.iter().enumerate() {
            rhs[i] -= self.n * self.lambda * self.beta[j].signum();
        }
        let Some(chol) = gram.cholesky() else {
            return false;
        };
        let sol = chol.solve(&rhs);
        if support.iter().enumerate().any(|(i, &j)| sol[i] == 0.0 || sol[i].signum() != self.beta[j].signum()) {
            return false;
        }
        let before = self.objective();
        let old_beta = self.beta.clone();
        let old_resid = self.resid.clone();
        for (i, &j) in support.iter().enumerate() {
            self.beta[j] = sol[i];
        }
        self.resid = self.y - self.x * &self.beta;
        if self.objective() <= before * (1.0 + 1e-14) {
            true
        } else {
            self.beta = old_beta;
            self.resid = old_resid;
            false
        }
    }
}

pub(crate) fn solve(
    instance: &RegressionInstance,
    lambda: f64,
    mu: f64,
    opts: FitOptions,
    init: Option<&DVector<f64>>,
) -> Result<RawFit> {
    let x = &instance.x;
    let n = instance.n() as f64;
    let p = instance.p();
    let beta = init.cloned().unwrap_or_else(|| DVector::zeros(p));
    let resid = &instance.y - x * &beta;
    let col_sq = (0..p).map(|j| x.column(j).norm_squared() / n).collect();
    let mut st = State { x, y: &instance.y, n, lambda, mu, col_sq, beta, resid };

    let mut trace = vec![st.objective()];
    let mut sweeps = 0;
    let mut prev_support: Option<Vec<usize>> = None;
    let mut best = (f64::INFINITY, st.beta.clone());

    while sweeps < opts.max_iter {
        for j in 0..p {
            st.update(j);
        }
        sweeps += 1;
        trace.push(st.objective());

        let mut violation = st.kkt();
        if violation < best.0 {
            best = (violation, st.beta.clone());
        }
        if violation <= opts.tol {
            return Ok(RawFit { beta: st.beta, iterations: sweeps, trace });
        }

        let support = st.support();
        if prev_support.as_ref() == Some(&support) && st.polish(&support) {
            trace.push(st.objective());
            violation = st.kkt();
            if violation < best.0 {
                best = (violation, st.beta.clone());
            }
            if violation <= opts.tol {
                return Ok(RawFit { beta: st.beta, iterations: sweeps, trace });
            }
        }
        prev_support = Some(support);

        // Sweeps restricted to the support until it is internally converged.
        let active = st.support();
        while sweeps < opts.max_iter && !active.is_empty() {
            let mut delta: f64 = 0.0;
            for &j in &active {
                delta = delta.max(st.update(j));
            }
            sweeps += 1;
            if delta <= 0.1 * opts.tol {
                break;
            }
        }
    }
    Err(Error::NotConverged { beta: best.1, violation: best.0, iterations: sweeps })
}
