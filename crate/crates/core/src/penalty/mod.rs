//! Convex penalties and solvers for
//! `β̂ = argmin_b ‖y − Xb‖²/(2n) + g(b)`.
//!
//! Every solver stops on the KKT violation of its iterate, not on iterate
//! change, and reports per-coordinate (or per-group) slack of the inactive
//! subgradient bounds so callers can check that the support is locally
//! constant.

mod coordinate;
mod group;
mod smooth;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::RegressionInstance;

pub use smooth::{check_smooth_consistency, LogCosh};

/// Twice-differentiable convex penalty supplied by the caller.
pub trait SmoothPenaltyFn: Send + Sync + fmt::Debug {
    fn value(&self, b: &DVector<f64>) -> f64;
    fn gradient(&self, b: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, b: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct SmoothPenalty {
    pub func: Arc<dyn SmoothPenaltyFn>,
    /// Lower bound on the Hessian, μ ≥ 0.
    pub strong_convexity: f64,
}

/// Partition of `{0..p}` into groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Groups {
    members: Vec<Vec<usize>>,
    p: usize,
}

impl Groups {
    pub fn new(members: Vec<Vec<usize>>, p: usize) -> Result<Self> {
        let mut seen = vec![false; p];
        for g in &members {
            if g.is_empty() {
                return Err(Error::InvalidInput("empty group".into()));
            }
            for &j in g {
                if j >= p {
                    return Err(Error::InvalidInput(format!("group index {j} out of range for p = {p}")));
                }
                if seen[j] {
                    return Err(Error::InvalidInput(format!("coordinate {j} belongs to two groups")));
                }
                seen[j] = true;
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("coordinate {j} is not covered by any group")));
        }
        Ok(Self { members, p })
    }

    /// Consecutive groups with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut members = Vec::with_capacity(sizes.len());
        for &s in sizes {
            members.push((start..start + s).collect());
            start += s;
        }
        Self::new(members, start)
    }

    pub fn singletons(p: usize) -> Self {
        Self { members: (0..p).map(|j| vec![j]).collect(), p }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.members.iter().map(|g| g.as_slice())
    }

    pub fn group(&self, k: usize) -> &[usize] {
        &self.members[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone)]
pub enum Penalty {
    Lasso {
        lambda: f64,
    },
    GroupLasso {
        groups: Groups,
        lambdas: Vec<f64>,
    },
    /// g(b) = (μ/2)‖b‖².
    Ridge {
        mu: f64,
    },
    /// g(b) = λ‖b‖₁ + (μ/2)‖b‖².
    ElasticNet {
        lambda: f64,
        mu: f64,
    },
    Smooth(SmoothPenalty),
}

impl Penalty {
    pub fn group_lasso_equal(groups: Groups, lambda: f64) -> Self {
        let lambdas = vec![lambda; groups.len()];
        Penalty::GroupLasso { groups, lambdas }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Penalty::Lasso { lambda } => positive("lambda", *lambda),
            Penalty::Ridge { mu } => positive("mu", *mu),
            Penalty::ElasticNet { lambda, mu } => {
                positive("lambda", *lambda)?;
                positive("mu", *mu)
            }
            Penalty::GroupLasso { groups, lambdas } => {
                if groups.dim() != p {
                    return Err(Error::Dimension(format!("groups cover {} coordinates, p = {p}", groups.dim())));
                }
                if lambdas.len() != groups.len() {
                    return Err(Error::Dimension(format!(
                        "{} group weights for {} groups",
                        lambdas.len(),
                        groups.len()
                    )));
                }
                lambdas.iter().try_for_each(|&l| positive("group lambda", l))
            }
            Penalty::Smooth(s) => {
                if s.strong_convexity >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidInput("strong convexity must be nonnegative".into()))
                }
            }
        }
    }

    /// Main tuning parameter, used for labelling and for ordering warm starts.
    pub fn tuning(&self) -> f64 {
        match self {
            Penalty::Lasso { lambda } | Penalty::ElasticNet { lambda, .. } => *lambda,
            Penalty::GroupLasso { lambdas, .. } => lambdas.iter().cloned().fold(0.0, f64::max),
            Penalty::Ridge { mu } => *mu,
            Penalty::Smooth(s) => s.strong_convexity,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Penalty::Lasso { .. } => "lasso",
            Penalty::GroupLasso { .. } => "group-lasso",
            Penalty::Ridge { .. } => "ridge",
            Penalty::ElasticNet { .. } => "elastic-net",
            Penalty::Smooth(_) => "smooth",
        }
    }

    /// Strong convexity constant with respect to the Euclidean norm.
    pub fn strong_convexity(&self) -> f64 {
        match self {
            Penalty::Lasso { .. } | Penalty::GroupLasso { .. } => 0.0,
            Penalty::Ridge { mu } | Penalty::ElasticNet { mu, .. } => *mu,
            Penalty::Smooth(s) => s.strong_convexity,
        }
    }
}

pub fn penalty_value(pen: &Penalty, b: &DVector<f64>) -> f64 {
    match pen {
        Penalty::Lasso { lambda } => lambda * b.lp_norm(1),
        Penalty::GroupLasso { groups, lambdas } => {
            groups.iter().zip(lambdas).map(|(g, l)| l * g.iter().map(|&j| b[j] * b[j]).sum::<f64>().sqrt()).sum()
        }
        Penalty::Ridge { mu } => 0.5 * mu * b.norm_squared(),
        Penalty::ElasticNet { lambda, mu } => lambda * b.lp_norm(1) + 0.5 * mu * b.norm_squared(),
        Penalty::Smooth(s) => s.func.value(b),
    }
}

pub fn objective(instance: &RegressionInstance, pen: &Penalty, b: &DVector<f64>) -> f64 {
    let r = &instance.y - &instance.x * b;
    r.norm_squared() / (2.0 * instance.n() as f64) + penalty_value(pen, b)
}

/// Support threshold `1e-8 · max(1, ‖β̂‖∞)`.
pub fn zero_threshold(beta: &DVector<f64>) -> f64 {
    1e-8 * beta.amax().max(1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100_000 }
    }
}

/// Inactive coordinate (Lasso, elastic net) or group (group Lasso) slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slack {
    pub index: usize,
    pub slack: f64,
}

#[derive(Debug, Clone)]
pub struct KktReport {
    pub max_violation: f64,
    pub strict_slacks: Vec<Slack>,
}

impl KktReport {
    pub fn is_strict(&self) -> bool {
        self.strict_slacks.iter().all(|s| s.slack > 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub residual: DVector<f64>,
    pub objective: f64,
    /// Coordinate sweeps (or Newton steps) performed.
    pub iterations: usize,
    pub kkt_max_violation: f64,
    /// Ŝ, sorted.
    pub active: Vec<usize>,
    /// B̂ for the group Lasso.
    pub active_groups: Option<Vec<usize>>,
    pub kkt_strict: Vec<Slack>,
    /// Objective after each full sweep / outer step.
    pub objective_trace: Vec<f64>,
}

pub fn fit(instance: &RegressionInstance, pen: &Penalty, tol: f64, max_iter: usize) -> Result<FitResult> {
    fit_with(instance, pen, FitOptions { tol, max_iter }, None)
}

/// As [`fit`], optionally warm-started from `init`.
pub fn fit_with(
    instance: &RegressionInstance,
    pen: &Penalty,
    opts: FitOptions,
    init: Option<&DVector<f64>>,
) -> Result<FitResult> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", opts.tol)));
    }
    instance.check_finite()?;
    pen.validate(instance.p())?;
    if let Some(b) = init {
        if b.len() != instance.p() {
            return Err(Error::Dimension("warm start has wrong length".into()));
        }
    }
    let raw = match pen {
        Penalty::Lasso { lambda } => coordinate::solve(instance, *lambda, 0.0, opts, init)?,
        Penalty::ElasticNet { lambda, mu } => coordinate::solve(instance, *lambda, *mu, opts, init)?,
        Penalty::GroupLasso { groups, lambdas } => group::solve(instance, groups, lambdas, opts, init)?,
        Penalty::Ridge { mu } => smooth::solve_ridge(instance, *mu)?,
        Penalty::Smooth(s) => {
            check_smooth_consistency(s.func.as_ref(), instance.p(), 0x5eed)?;
            smooth::solve_newton(instance, s, opts, init)?
        }
    };
    Ok(finish(instance, pen, raw))
}

/// Solver output before the support and KKT certificate are attached.
pub(crate) struct RawFit {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

fn finish(instance: &RegressionInstance, pen: &Penalty, raw: RawFit) -> FitResult {
    let residual = &instance.y - &instance.x * &raw.beta;
    let objective = residual.norm_squared() / (2.0 * instance.n() as f64) + penalty_value(pen, &raw.beta);
    let thr = zero_threshold(&raw.beta);
    let (active, active_groups) = match pen {
        Penalty::GroupLasso { groups, .. } => {
            let blocks: Vec<usize> =
                (0..groups.len()).filter(|&k| group_norm(&raw.beta, groups.group(k)) > thr).collect();
            let mut s: Vec<usize> = blocks.iter().flat_map(|&k| groups.group(k).iter().copied()).collect();
            s.sort_unstable();
            (s, Some(blocks))
        }
        _ => ((0..raw.beta.len()).filter(|&j| raw.beta[j].abs() > thr).collect(), None),
    };
    let report = kkt_at(instance, pen, &raw.beta, &residual);
    FitResult {
        beta_hat: raw.beta,
        residual,
        objective,
        iterations: raw.iterations,
        kkt_max_violation: report.max_violation,
        active,
        active_groups,
        kkt_strict: report.strict_slacks,
        objective_trace: raw.trace,
    }
}

pub(crate) fn group_norm(b: &DVector<f64>, g: &[usize]) -> f64 {
    g.iter().map(|&j| b[j] * b[j]).sum::<f64>().sqrt()
}

pub fn kkt_report(fit: &FitResult, instance: &RegressionInstance, pen: &Penalty) -> KktReport {
    kkt_at(instance, pen, &fit.beta_hat, &fit.residual)
}

/// KKT violation of `beta` (on the gradient scale, i.e. divided by n) and
/// inactive slacks.
pub(crate) fn kkt_at(
    instance: &RegressionInstance,
    pen: &Penalty,
    beta: &DVector<f64>,
    residual: &DVector<f64>,
) -> KktReport {
    let n = instance.n() as f64;
    let corr = instance.x.tr_mul(residual) / n;
    let mut max_violation: f64 = 0.0;
    let mut strict_slacks = Vec::new();
    match pen {
        Penalty::Lasso { lambda } | Penalty::ElasticNet { lambda, .. } => {
            let mu = if let Penalty::ElasticNet { mu, .. } = pen { *mu } else { 0.0 };
            for j in 0..beta.len() {
                let v = if beta[j] != 0.0 {
                    (corr[j] - mu * beta[j] - lambda * beta[j].signum()).abs()
                } else {
                    strict_slacks.push(Slack { index: j, slack: lambda - corr[j].abs() });
                    (corr[j].abs() - lambda).max(0.0)
                };
                max_violation = max_violation.max(v);
            }
        }
        Penalty::GroupLasso { groups, lambdas } => {
            for (k, g) in groups.iter().enumerate() {
                let norm_b = group_norm(beta, g);
                let v = if norm_b > 0.0 {
                    g.iter()
                        .map(|&j| {
                            let d = corr[j] - lambdas[k] * beta[j] / norm_b;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                } else {
                    let norm_c = group_norm(&corr, g);
                    strict_slacks.push(Slack { index: k, slack: n * lambdas[k] - n * norm_c });
                    (norm_c - lambdas[k]).max(0.0)
                };
                max_violation = max_violation.max(v);
            }
        }
        Penalty::Ridge { mu } => {
            max_violation = (corr - beta * *mu).amax();
        }
        Penalty::Smooth(s) => {
            max_violation = (corr - s.func.gradient(beta)).amax();
        }
    }
    KktReport { max_violation, strict_slacks }
}

#[cfg(test)]
mod tests;
