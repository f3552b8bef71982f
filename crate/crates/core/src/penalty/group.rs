//! Block coordinate descent for the group Lasso.
//!
//! Each block is minimized by repeated proximal steps on its exact quadratic
//! model with step `1/L_k`, `L_k = ‖X_GᵀX_G‖_op / n`; the prox of
//! `λ_k‖·‖₂` is closed-form group shrinkage. After the active groups settle,
//! a damped Newton iteration on the (smooth) restricted problem finishes
//! the solve to high accuracy.

use nalgebra::{DMatrix, DVector};

use super::{group_norm, FitOptions, Groups, RawFit};
use crate::error::{Error, Result};
use crate::model::RegressionInstance;

const MAX_INNER: usize = 200;

struct Block {
    idx: Vec<usize>,
    xg: DMatrix<f64>,
    /// X_GᵀX_G / n.
    gram: DMatrix<f64>,
    lipschitz: f64,
}

struct State<'a> {
    y: &'a DVector<f64>,
    x: &'a DMatrix<f64>,
    n: f64,
    blocks: Vec<Block>,
    lambdas: &'a [f64],
    beta: DVector<f64>,
    resid: DVector<f64>,
}

impl State<'_> {
    fn objective(&self) -> f64 {
        self.resid.norm_squared() / (2.0 * self.n)
            + self.blocks.iter().zip(self.lambdas).map(|(b, l)| l * group_norm(&self.beta, &b.idx)).sum::<f64>()
    }

    fn block_values(&self, k: usize) -> DVector<f64> {
        DVector::from_iterator(self.blocks[k].idx.len(), self.blocks[k].idx.iter().map(|&j| self.beta[j]))
    }

    /// Minimizes over block `k`; returns the largest gradient-scale change.
    fn update(&mut self, k: usize, tol: f64) -> f64 {
        let blk = &self.blocks[k];
        if blk.lipschitz == 0.0 {
            return 0.0;
        }
        let lambda = self.lambdas[k];
        let old = self.block_values(k);
        // ∇ of the smooth part restricted to the block: −X_Gᵀr/n.
        let mut grad = -(blk.xg.tr_mul(&self.resid) / self.n);
        let mut cur = old.clone();
        for _ in 0..MAX_INNER {
            let v = &cur - &grad / blk.lipschitz;
            let norm_v = v.norm();
            let shrink = if norm_v > 0.0 { (1.0 - lambda / (blk.lipschitz * norm_v)).max(0.0) } else { 0.0 };
            let next = v * shrink;
            let step = &next - &cur;
            grad += &blk.gram * &step;
            cur = next;
            if step.amax() * blk.lipschitz <= 0.1 * tol {
                break;
            }
        }
        let delta = &cur - &old;
        if delta.amax() > 0.0 {
            self.resid -= &blk.xg * &delta;
            for (i, &j) in blk.idx.iter().enumerate() {
                self.beta[j] = cur[i];
            }
        }
        delta.amax() * blk.lipschitz
    }

    fn active_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&k| group_norm(&self.beta, &self.blocks[k].idx) > 0.0).collect()
    }

    fn kkt(&self) -> f64 {
        let corr = self.x.tr_mul(&self.resid) / self.n;
        self.blocks
            .iter()
            .zip(self.lambdas)
            .map(|(b, &l)| {
                let nb = group_norm(&self.beta, &b.idx);
                if nb > 0.0 {
                    b.idx.iter().map(|&j| (corr[j] - l * self.beta[j] / nb).powi(2)).sum::<f64>().sqrt()
                } else {
                    (group_norm(&corr, &b.idx) - l).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Damped Newton on the active blocks, holding inactive blocks at zero.
    fn polish(&mut self, active: &[usize], tol: f64) -> bool {
        let support: Vec<usize> = active.iter().flat_map(|&k| self.blocks[k].idx.iter().copied()).collect();
        let m = support.len();
        if m == 0 {
            return false;
        }
        let xs = self.x.select_columns(&support);
        let gram = xs.tr_mul(&xs) / self.n;
        let xty = xs.tr_mul(self.y) / self.n;
        // offsets of each active block inside the support vector
        let mut offsets = Vec::with_capacity(active.len());
        let mut off = 0;
        for &k in active {
            offsets.push(off);
            off += self.blocks[k].idx.len();
        }
        let restricted_obj = |b: &DVector<f64>| -> f64 {
            let r = self.y - &xs * b;
            let mut v = r.norm_squared() / (2.0 * self.n);
            for (a, &k) in active.iter().enumerate() {
                let sz = self.blocks[k].idx.len();
                v += self.lambdas[k] * b.rows(offsets[a], sz).norm();
            }
            v
        };
        let mut b = DVector::from_iterator(m, support.iter().map(|&j| self.beta[j]));
        let start_obj = restricted_obj(&b);
        let mut obj = start_obj;
        for _ in 0..50 {
            let mut grad = &gram * &b - &xty;
            let mut hess = gram.clone();
            for (a, &k) in active.iter().enumerate() {
                let sz = self.blocks[k].idx.len();
                let bg = b.rows(offsets[a], sz).into_owned();
                let nb = bg.norm();
                if nb == 0.0 {
                    return false;
                }
                let l = self.lambdas[k];
                grad.rows_mut(offsets[a], sz).axpy(l / nb, &bg, 1.0);
                let proj = DMatrix::identity(sz, sz) - &bg * bg.transpose() / (nb * nb);
                let mut hb = hess.view_mut((offsets[a], offsets[a]), (sz, sz));
                hb += proj * (l / nb);
            }
            if grad.amax() <= 0.01 * tol {
                break;
            }
            let Some(chol) = hess.cholesky() else {
                return false;
            };
            let dir = -chol.solve(&grad);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &b + &dir * t;
                let c_obj = restricted_obj(&cand);
                if c_obj <= obj {
                    b = cand;
                    obj = c_obj;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if obj > start_obj {
            return false;
        }
        let old_beta = self.beta.clone();
        for (i, &j) in support.iter().enumerate() {
            self.beta[j] = b[i];
        }
        // a block that collapsed to zero means the support guess was wrong
        if active.iter().any(|&k| group_norm(&self.beta, &self.blocks[k].idx) == 0.0) {
            self.beta = old_beta;
            return false;
        }
        self.resid = self.y - self.x * &self.beta;
        true
    }
}

pub(crate) fn solve(
    instance: &RegressionInstance,
    groups: &Groups,
    lambdas: &[f64],
    opts: FitOptions,
    init: Option<&DVector<f64>>,
) -> Result<RawFit> {
    let x = &instance.x;
    let n = instance.n() as f64;
    let blocks: Vec<Block> = groups
        .iter()
        .map(|g| {
            let xg = x.select_columns(g);
            let gram = xg.tr_mul(&xg) / n;
            let lipschitz = gram.clone().symmetric_eigenvalues().max().max(0.0);
            Block { idx: g.to_vec(), xg, gram, lipschitz }
        })
        .collect();
    let beta = init.cloned().unwrap_or_else(|| DVector::zeros(instance.p()));
    let resid = &instance.y - x * &beta;
    let mut st = State { y: &instance.y, x, n, blocks, lambdas, beta, resid };

    let nblocks = st.blocks.len();
    let mut trace = vec![st.objective()];
    let mut sweeps = 0;
    let mut prev_active: Option<Vec<usize>> = None;
    let mut best = (f64::INFINITY, st.beta.clone());

    while sweeps < opts.max_iter {
        for k in 0..nblocks {
            st.update(k, opts.tol);
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

        let active = st.active_blocks();
        if prev_active.as_ref() == Some(&active) && st.polish(&active, opts.tol) {
            trace.push(st.objective());
            violation = st.kkt();
            if violation < best.0 {
                best = (violation, st.beta.clone());
            }
            if violation <= opts.tol {
                return Ok(RawFit { beta: st.beta, iterations: sweeps, trace });
            }
        }
        prev_active = Some(active.clone());

        while sweeps < opts.max_iter && !active.is_empty() {
            let mut delta: f64 = 0.0;
            for &k in &active {
                delta = delta.max(st.update(k, opts.tol));
            }
            sweeps += 1;
            if delta <= 0.1 * opts.tol {
                break;
            }
        }
    }
    Err(Error::NotConverged { beta: best.1, violation: best.0, iterations: sweeps })
}
