//! Variance estimates, pivots and confidence intervals for ⟨a0, β⟩.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::debias::{Debiased, Quadratic};
use crate::error::{Error, Result};
use crate::model::{Direction, RegressionInstance};
use crate::normal;
use crate::penalty::{FitResult, Penalty};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimates {
    /// ‖y − Xβ̂‖².
    pub v_resid: f64,
    /// V̂(θ) = ‖y − Xβ̂‖² + ‖I − Ĥ‖_F²(⟨a0, β̂⟩ − θ)².
    pub v_hat: Quadratic,
    /// V̂ at θ = ⟨a0, β̂^debias⟩.
    pub v_check: f64,
    /// V*(θ) = ‖y − Xβ̂‖² + tr[(∇f(z0))²].
    pub v_star: Quadratic,
}

/// Which variance normalizes the pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Resid,
    Vhat,
    Vcheck,
    Vstar,
}

impl VarianceKind {
    pub const ALL: [VarianceKind; 4] = [Self::Resid, Self::Vhat, Self::Vcheck, Self::Vstar];

    pub fn name(self) -> &'static str {
        match self {
            Self::Resid => "resid",
            Self::Vhat => "vhat",
            Self::Vcheck => "vcheck",
            Self::Vstar => "vstar",
        }
    }
}

impl fmt::Display for VarianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VarianceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variance kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiKind {
    Narrow,
    Spike,
    Quadratic,
}

impl CiKind {
    pub const ALL: [CiKind; 3] = [Self::Narrow, Self::Spike, Self::Quadratic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Narrow => "narrow",
            Self::Spike => "spike",
            Self::Quadratic => "quadratic",
        }
    }
}

impl fmt::Display for CiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub kind: CiKind,
    pub alpha: f64,
    pub valid: bool,
    pub reason: Option<String>,
}

impl ConfidenceInterval {
    pub fn contains(&self, theta: f64) -> bool {
        self.valid && self.lo <= theta && theta <= self.hi
    }

    pub fn width(&self) -> f64 {
        if self.valid {
            self.hi - self.lo
        } else {
            f64::INFINITY
        }
    }

    fn invalid(kind: CiKind, alpha: f64, reason: &str) -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY, kind, alpha, valid: false, reason: Some(reason.to_owned()) }
    }
}

/// Diagnostics for the variance-spike regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeDiagnostics {
    /// ⟨z0, r⟩² / (n‖r‖²).
    pub score_ratio: f64,
    /// V̌ / ‖r‖².
    pub v_check_ratio: f64,
    /// V̂(θ) / ‖r‖² at the true θ.
    pub v_hat_ratio: Option<f64>,
    /// n⟨a0, h⟩² / ‖r‖².
    pub bias_ratio: Option<f64>,
    /// ⟨w0, r⟩² / V̂(θ) at the true θ.
    pub w0_term: Option<f64>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Summary scalars every interval needs.
struct Parts {
    /// n − d̂f.
    d: f64,
    /// ⟨a0, β̂⟩.
    a: f64,
    /// ⟨z0, r⟩.
    b: f64,
    /// ‖r‖².
    r2: f64,
    /// ‖I − Ĥ‖_F².
    c2: f64,
}

impl Parts {
    fn new(ctx: &Debiased<'_>, dir: &Direction) -> Result<Self> {
        Ok(Self {
            d: ctx.n_minus_df()?,
            a: dir.a0.dot(&ctx.fit.beta_hat),
            b: dir.z0.dot(ctx.residual()),
            r2: ctx.residual_norm_sq(),
            c2: ctx.frob_i_minus_h_sq,
        })
    }

    fn center(&self) -> f64 {
        self.a + self.b / self.d
    }
}

impl<'a> Debiased<'a> {
    pub fn variance_estimates(&self, dir: &Direction) -> Result<VarianceEstimates> {
        let p = Parts::new(self, dir)?;
        let v_hat = Quadratic { c2: p.c2, c1: -2.0 * p.c2 * p.a, c0: p.r2 + p.c2 * p.a * p.a };
        Ok(VarianceEstimates {
            v_resid: p.r2,
            v_hat,
            v_check: p.r2 + p.c2 * p.b * p.b / (p.d * p.d),
            v_star: self.v_star(dir),
        })
    }

    /// (n − d̂f)(θ̂ − θ) / V0^{1/2}.
    pub fn pivot(&self, dir: &Direction, theta: f64, v0: VarianceKind) -> Result<f64> {
        let d = self.n_minus_df()?;
        let v = self.variance_estimates(dir)?;
        let var = match v0 {
            VarianceKind::Resid => v.v_resid,
            VarianceKind::Vhat => v.v_hat.eval(theta),
            VarianceKind::Vcheck => v.v_check,
            VarianceKind::Vstar => v.v_star.eval(theta),
        };
        if !(var > 0.0) {
            return Err(Error::InvalidVariance(var));
        }
        Ok(d * (self.theta_hat(dir)? - theta) / var.sqrt())
    }

    pub fn ci_narrow(&self, dir: &Direction, alpha: f64) -> Result<ConfidenceInterval> {
        check_alpha(alpha)?;
        let p = Parts::new(self, dir)?;
        let half = normal::two_sided_critical(alpha) * p.r2.sqrt() / p.d;
        Ok(symmetric(p.center(), half, CiKind::Narrow, alpha))
    }

    pub fn ci_spike(&self, dir: &Direction, alpha: f64) -> Result<ConfidenceInterval> {
        check_alpha(alpha)?;
        let p = Parts::new(self, dir)?;
        let d2 = p.d * p.d;
        let var = p.r2 / d2 + p.c2 * p.b * p.b / (d2 * d2);
        let half = normal::two_sided_critical(alpha) * var.sqrt();
        Ok(symmetric(p.center(), half, CiKind::Spike, alpha))
    }

    /// {θ : [(n − d̂f)(⟨a0, β̂⟩ − θ) + ⟨z0, r⟩]² ≤ z² V̂(θ)}.
    pub fn ci_quadratic(&self, dir: &Direction, alpha: f64) -> Result<ConfidenceInterval> {
        check_alpha(alpha)?;
        let p = Parts::new(self, dir)?;
        let z = normal::two_sided_critical(alpha);
        quadratic_interval(p.d, p.a, p.b, p.r2, p.c2, z, alpha)
    }

    /// Quadratic interval when bounded, otherwise the spike interval.
    pub fn default_ci(&self, dir: &Direction, alpha: f64) -> Result<ConfidenceInterval> {
        let q = self.ci_quadratic(dir, alpha)?;
        if q.valid {
            Ok(q)
        } else {
            self.ci_spike(dir, alpha)
        }
    }

    pub fn ci(&self, dir: &Direction, alpha: f64, kind: CiKind) -> Result<ConfidenceInterval> {
        match kind {
            CiKind::Narrow => self.ci_narrow(dir, alpha),
            CiKind::Spike => self.ci_spike(dir, alpha),
            CiKind::Quadratic => self.ci_quadratic(dir, alpha),
        }
    }

    pub fn spike_diagnostics(&self, dir: &Direction) -> Result<SpikeDiagnostics> {
        let p = Parts::new(self, dir)?;
        let v = self.variance_estimates(dir)?;
        let n = self.n() as f64;
        let theta = self.instance.truth.as_ref().map(|t| dir.a0.dot(&t.beta));
        let (w0, _) = self.w0(dir);
        let w0r = w0.dot(self.residual());
        Ok(SpikeDiagnostics {
            score_ratio: p.b * p.b / (n * p.r2),
            v_check_ratio: v.v_check / p.r2,
            v_hat_ratio: theta.map(|t| v.v_hat.eval(t) / p.r2),
            bias_ratio: theta.map(|t| n * (p.a - t).powi(2) / p.r2),
            w0_term: theta.map(|t| w0r * w0r / v.v_hat.eval(t)),
        })
    }
}

fn symmetric(center: f64, half: f64, kind: CiKind, alpha: f64) -> ConfidenceInterval {
    ConfidenceInterval { lo: center - half, hi: center + half, kind, alpha, valid: true, reason: None }
}

/// Solves `(d² − z²c2)u² + 2dbu + b² − z²r2 ≤ 0` for u = a − θ.
pub fn quadratic_interval(d: f64, a: f64, b: f64, r2: f64, c2: f64, z: f64, alpha: f64) -> Result<ConfidenceInterval> {
    let qa = d * d - z * z * c2;
    if !(qa > 0.0) {
        return Ok(ConfidenceInterval::invalid(CiKind::Quadratic, alpha, "unbounded CI"));
    }
    let qb = 2.0 * d * b;
    let qc = b * b - z * z * r2;
    // b² − 4ac = 4z²(c2 b² + qa r2), nonnegative here
    let disc = 4.0 * z * z * (c2 * b * b + qa * r2);
    assert!(disc >= 0.0, "negative discriminant {disc}");
    let q = -0.5 * (qb + qb.signum() * disc.sqrt());
    let (u1, u2) = if q == 0.0 { (0.0, 0.0) } else { (q / qa, qc / q) };
    let (t1, t2) = (a - u1, a - u2);
    Ok(ConfidenceInterval { lo: t1.min(t2), hi: t1.max(t2), kind: CiKind::Quadratic, alpha, valid: true, reason: None })
}

pub fn variance_estimates(
    fit: &FitResult,
    dir: &Direction,
    pen: &Penalty,
    instance: &RegressionInstance,
) -> Result<VarianceEstimates> {
    Debiased::new(instance, fit, pen)?.variance_estimates(dir)
}

pub fn pivot(
    fit: &FitResult,
    dir: &Direction,
    pen: &Penalty,
    instance: &RegressionInstance,
    theta_true: f64,
    v0: VarianceKind,
) -> Result<f64> {
    Debiased::new(instance, fit, pen)?.pivot(dir, theta_true, v0)
}

pub fn spike_diagnostics(
    fit: &FitResult,
    dir: &Direction,
    pen: &Penalty,
    instance: &RegressionInstance,
) -> Result<SpikeDiagnostics> {
    Debiased::new(instance, fit, pen)?.spike_diagnostics(dir)
}

/// Sample mean and standard deviation (n − 1 denominator).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / m;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}
