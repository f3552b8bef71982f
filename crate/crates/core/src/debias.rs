//! Derivative of the fitted values, effective degrees of freedom, the
//! direction-specific correction `w0`, and the de-biased estimates.
//!
//! For every supported penalty the fitted-value derivative has the form
//! `Ĥ = X_S K⁻¹ X_Sᵀ` for a support `S` and a positive definite `K`:
//!
//! | penalty      | S        | K                         |
//! |--------------|----------|---------------------------|
//! | Lasso        | Ŝ        | X_ŜᵀX_Ŝ                   |
//! | elastic net  | Ŝ        | X_ŜᵀX_Ŝ + nμI             |
//! | group Lasso  | ∪ B̂      | X_ŜᵀX_Ŝ + M               |
//! | ridge        | all      | XᵀX + nμI                 |
//! | smooth       | all      | XᵀX + n∇²g(β̂)             |
//!
//! and `w0 = X_S K⁻¹ (a0)_S`. [`HatOperator`] factors `K` once and serves all
//! downstream quantities from that factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{CovarianceSpec, Direction, RegressionInstance};
use crate::penalty::{self, group_norm, zero_threshold, FitOptions, FitResult, Groups, Penalty};

/// Largest n for which n x n matrices are formed.
pub const MATERIALIZE_LIMIT: usize = 2000;

/// `df` closer than this to `n` makes the correction degenerate.
const DF_MARGIN: f64 = 1e-8;

pub struct HatOperator {
    n: usize,
    support: Vec<usize>,
    xs: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    kind: HatKind,
    ridge_mu: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HatKind {
    /// Ĥ is an orthogonal projection (Lasso).
    Projection,
    General,
}

impl HatOperator {
    pub fn new(fit: &FitResult, pen: &Penalty, instance: &RegressionInstance) -> Result<Self> {
        let n = instance.n();
        let p = instance.p();
        let nf = n as f64;
        let mut warnings = Vec::new();
        let (support, extra, kind): (Vec<usize>, Option<DMatrix<f64>>, HatKind) = match pen {
            Penalty::Lasso { .. } => (fit.active.clone(), None, HatKind::Projection),
            Penalty::ElasticNet { mu, .. } => {
                let k = fit.active.len();
                (fit.active.clone(), Some(DMatrix::identity(k, k) * (nf * mu)), HatKind::General)
            }
            Penalty::GroupLasso { groups, lambdas } => {
                let (m, w) = group_lasso_m(fit, groups, lambdas)?;
                warnings = w;
                (fit.active.clone(), Some(m), HatKind::General)
            }
            Penalty::Ridge { mu } => ((0..p).collect(), Some(DMatrix::identity(p, p) * (nf * mu)), HatKind::General),
            Penalty::Smooth(s) => ((0..p).collect(), Some(s.func.hessian(&fit.beta_hat) * nf), HatKind::General),
        };
        let xs = instance.x.select_columns(&support);
        let chol = if support.is_empty() {
            None
        } else {
            let mut k = xs.tr_mul(&xs);
            if let Some(e) = extra {
                k += e;
            }
            Some(factor(k)?)
        };
        let ridge_mu = if let Penalty::Ridge { mu } = pen { Some(*mu) } else { None };
        Ok(Self { n, support, xs, chol, kind, ridge_mu, warnings })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Ĥ v.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(self.n),
            Some(c) => &self.xs * c.solve(&self.xs.tr_mul(v)),
        }
    }

    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        if self.n > MATERIALIZE_LIMIT {
            return Err(Error::InvalidInput(format!(
                "refusing to materialize a {0}x{0} matrix (limit {MATERIALIZE_LIMIT})",
                self.n
            )));
        }
        Ok(match &self.chol {
            None => DMatrix::zeros(self.n, self.n),
            Some(c) => {
                let h = &self.xs * c.solve(&self.xs.transpose());
                (&h + h.transpose()) * 0.5
            }
        })
    }

    /// B = K⁻¹ X_SᵀX_S, whose trace is df and whose squared trace is ‖Ĥ‖_F².
    fn reduced(&self) -> Option<DMatrix<f64>> {
        self.chol.as_ref().map(|c| c.solve(&self.xs.tr_mul(&self.xs)))
    }

    /// tr Ĥ.
    pub fn df(&self) -> f64 {
        if self.kind == HatKind::Projection {
            return self.support.len() as f64;
        }
        if let Some(mu) = self.ridge_mu {
            return ridge_spectrum(&self.xs, mu).0;
        }
        self.reduced().map_or(0.0, |b| b.trace())
    }

    /// ‖I − Ĥ‖_F².
    pub fn frob_i_minus_h_sq(&self) -> f64 {
        let n = self.n as f64;
        if self.kind == HatKind::Projection {
            return n - self.support.len() as f64;
        }
        if let Some(mu) = self.ridge_mu {
            return ridge_spectrum(&self.xs, mu).1;
        }
        match self.reduced() {
            None => n,
            Some(b) => {
                let tr = b.trace();
                let tr_sq = b.component_mul(&b.transpose()).sum();
                n - 2.0 * tr + tr_sq
            }
        }
    }

    /// X_S K⁻¹ (a0)_S.
    pub fn w0(&self, a0: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(self.n),
            Some(c) => {
                let a_s = DVector::from_iterator(self.support.len(), self.support.iter().map(|&j| a0[j]));
                &self.xs * c.solve(&a_s)
            }
        }
    }
}

/// Cholesky with a crude conditioning guard on the pivots.
fn factor(k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let dim = k.nrows();
    let chol = Cholesky::new(k).ok_or_else(|| Error::DegenerateActiveSet("Cholesky factorization failed".into()))?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..dim {
        let d = l[(i, i)] * l[(i, i)];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(lo > 1e-13 * hi) {
        return Err(Error::DegenerateActiveSet(format!("numerically singular (pivot ratio {:e})", lo / hi)));
    }
    Ok(chol)
}

/// (tr Ĥ, ‖I − Ĥ‖_F²) for ridge from the singular values of X.
fn ridge_spectrum(x: &DMatrix<f64>, mu: f64) -> (f64, f64) {
    let n = x.nrows();
    let shift = n as f64 * mu;
    let sv = x.clone().singular_values();
    let mut df = 0.0;
    let mut frob = (n - sv.len()) as f64;
    for s in sv.iter() {
        let s2 = s * s;
        df += s2 / (s2 + shift);
        let c = shift / (s2 + shift);
        frob += c * c;
    }
    (df, frob)
}

/// Block-diagonal curvature of the group-Lasso norm on the active groups:
/// blocks `(nλ_k/‖β̂_G‖)(I − β̂_Gβ̂_Gᵀ/‖β̂_G‖²)`, ordered like `fit.active`.
///
/// Groups whose norm is within `10 x` the support threshold produce a
/// warning; the matrix is still returned.
pub fn group_lasso_m(fit: &FitResult, groups: &Groups, lambdas: &[f64]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = fit.residual.len() as f64;
    let active_groups =
        fit.active_groups.as_ref().ok_or_else(|| Error::InvalidInput("fit carries no active groups".into()))?;
    let thr = zero_threshold(&fit.beta_hat);
    let size: usize = active_groups.iter().map(|&k| groups.group(k).len()).sum();
    let mut m = DMatrix::zeros(size, size);
    let mut warnings = Vec::new();
    // fit.active is sorted; locate each group's coordinates in it
    let pos = |j: usize| fit.active.binary_search(&j).expect("active group member missing from support");
    for &k in active_groups {
        let g = groups.group(k);
        let norm = group_norm(&fit.beta_hat, g);
        if norm <= thr {
            return Err(Error::DegenerateActiveSet(format!("group {k} has zero norm")));
        }
        if norm < 10.0 * thr {
            warnings.push(format!("ill-conditioned group {k}: norm {norm:e}"));
        }
        let scale = n * lambdas[k] / norm;
        for &i in g {
            for &j in g {
                let id = if i == j { 1.0 } else { 0.0 };
                m[(pos(i), pos(j))] = scale * (id - fit.beta_hat[i] * fit.beta_hat[j] / (norm * norm));
            }
        }
    }
    Ok((m, warnings))
}

pub fn hat_h(fit: &FitResult, pen: &Penalty, instance: &RegressionInstance) -> Result<DMatrix<f64>> {
    HatOperator::new(fit, pen, instance)?.matrix()
}

pub fn df(fit: &FitResult, pen: &Penalty, instance: &RegressionInstance) -> Result<f64> {
    Ok(HatOperator::new(fit, pen, instance)?.df())
}

pub fn w0(fit: &FitResult, pen: &Penalty, dir: &Direction, instance: &RegressionInstance) -> Result<DVector<f64>> {
    let hat = HatOperator::new(fit, pen, instance)?;
    Ok(Debiased::from_parts(instance, fit, hat).w0(dir).0)
}

/// Upper bound on ‖w0‖² for a direction with ‖Σ^{-1/2}a0‖ = 1:
/// `n⁻¹ min{(4μ_Σ)⁻¹, φ_min(Σ^{-1/2}XᵀXΣ^{-1/2}/n)⁻¹}` where μ_Σ is the strong
/// convexity of the penalty relative to Σ. `None` when neither term is finite.
pub fn w0_norm_bound(pen: &Penalty, instance: &RegressionInstance, cov: &CovarianceSpec) -> Option<f64> {
    let (n, p) = instance.x.shape();
    let nf = n as f64;
    let mut bound = f64::INFINITY;
    let mu = pen.strong_convexity();
    if mu > 0.0 {
        let mu_sigma = mu / cov.operator_norm();
        bound = bound.min(1.0 / (4.0 * mu_sigma));
    }
    if n > p {
        // Σ^{-1/2}XᵀXΣ^{-1/2} has the spectrum of L⁻¹XᵀXL⁻ᵀ
        let l = cov.cholesky_lower();
        let xl = l.solve_lower_triangular(&instance.x.transpose()).expect("Cholesky factor is nonsingular");
        let phi = (&xl * xl.transpose() / nf).symmetric_eigenvalues().min();
        if phi > 0.0 {
            bound = bound.min(1.0 / phi);
        }
    }
    bound.is_finite().then_some(bound / nf)
}

/// Fitted model together with its factored derivative; the entry point for
/// everything that depends on a direction.
pub struct Debiased<'a> {
    pub instance: &'a RegressionInstance,
    pub fit: &'a FitResult,
    pub hat: HatOperator,
    pub df: f64,
    pub frob_i_minus_h_sq: f64,
}

/// Quantities of the de-biasing correction for one direction.
#[derive(Debug, Clone)]
pub struct DebiasReport {
    pub df: f64,
    pub frob_i_minus_h_sq: f64,
    pub w0: DVector<f64>,
    pub beta_debias: DVector<f64>,
    pub theta_hat: f64,
    pub w0_dot_residual: f64,
    /// Set when y = Xβ̂, in which case w0 is taken to be 0.
    pub interpolating: bool,
    pub warnings: Vec<String>,
}

/// ∇f(z0) for f(z0) = Xβ̂ − y as a function of z0 with (X Q0, ε) fixed,
/// stored as the Jacobian J with f(z0 + η) − f(z0) ≈ J η.
#[derive(Debug, Clone)]
pub struct GradF {
    pub jacobian: Option<DMatrix<f64>>,
    /// ⟨a0, h⟩ = ⟨a0, β̂⟩ − θ.
    pub a0_dot_h: f64,
    pub frob_sq: f64,
    pub trace_sq: f64,
    pub divergence: f64,
}

/// V*(θ) = ‖y − Xβ̂‖² + tr[(∇f(z0))²] as c2 θ² + c1 θ + c0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadratic {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Quadratic {
    pub fn eval(&self, t: f64) -> f64 {
        (self.c2 * t + self.c1) * t + self.c0
    }
}

impl<'a> Debiased<'a> {
    pub fn new(instance: &'a RegressionInstance, fit: &'a FitResult, pen: &Penalty) -> Result<Self> {
        let hat = HatOperator::new(fit, pen, instance)?;
        Ok(Self::from_parts(instance, fit, hat))
    }

    fn from_parts(instance: &'a RegressionInstance, fit: &'a FitResult, hat: HatOperator) -> Self {
        let df = hat.df();
        let frob_i_minus_h_sq = hat.frob_i_minus_h_sq();
        Self { instance, fit, hat, df, frob_i_minus_h_sq }
    }

    pub fn n(&self) -> usize {
        self.instance.n()
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.fit.residual
    }

    pub fn residual_norm_sq(&self) -> f64 {
        self.fit.residual.norm_squared()
    }

    pub fn is_interpolating(&self) -> bool {
        self.fit.residual.iter().all(|&v| v == 0.0)
    }

    /// n − d̂f, or an error when it is too close to 0.
    pub fn n_minus_df(&self) -> Result<f64> {
        let n = self.n() as f64;
        if self.df >= n - DF_MARGIN {
            Err(Error::DegenerateCorrection { df: self.df, n: self.n() })
        } else {
            Ok(n - self.df)
        }
    }

    /// `(w0, interpolating)`; w0 is 0 for interpolating fits.
    pub fn w0(&self, dir: &Direction) -> (DVector<f64>, bool) {
        if self.is_interpolating() {
            (DVector::zeros(self.n()), true)
        } else {
            (self.hat.w0(&dir.a0), false)
        }
    }

    /// ⟨a0, β̂⟩ + (n − d̂f)⁻¹⟨z0 + w0, y − Xβ̂⟩.
    pub fn theta_hat(&self, dir: &Direction) -> Result<f64> {
        let d = self.n_minus_df()?;
        let (w0, _) = self.w0(dir);
        let r = self.residual();
        Ok(dir.a0.dot(&self.fit.beta_hat) + (dir.z0.dot(r) + w0.dot(r)) / d)
    }

    /// β̂ + (n − d̂f)⁻¹ Σ⁻¹Xᵀ(y − Xβ̂).
    pub fn debias_vector(&self, cov: &CovarianceSpec) -> Result<DVector<f64>> {
        let d = self.n_minus_df()?;
        let corr = cov.solve(&self.instance.x.tr_mul(self.residual()));
        Ok(&self.fit.beta_hat + corr / d)
    }

    /// Resolves ⟨a0, h⟩ from an explicit θ or the instance's truth.
    fn a0_dot_h(&self, dir: &Direction, theta: Option<f64>) -> Result<f64> {
        let theta = match (theta, &self.instance.truth) {
            (Some(t), _) => t,
            (None, Some(truth)) => dir.a0.dot(&truth.beta),
            (None, None) => return Err(Error::ThetaRequired),
        };
        Ok(dir.a0.dot(&self.fit.beta_hat) - theta)
    }

    /// Scalars (rᵀ(I − Ĥ)w0, rᵀw0, ‖w0‖²) shared by the gradient functionals.
    fn cross_terms(&self, w0: &DVector<f64>) -> (f64, f64, f64) {
        let r = self.residual();
        let hw = self.hat.apply(w0);
        (r.dot(w0) - r.dot(&hw), r.dot(w0), w0.norm_squared())
    }

    pub fn grad_f_z0(&self, dir: &Direction, theta: Option<f64>) -> Result<GradF> {
        let c = self.a0_dot_h(dir, theta)?;
        let (w0, _) = self.w0(dir);
        let (q, t, ww) = self.cross_terms(&w0);
        let f = self.frob_i_minus_h_sq;
        let r = self.residual();
        let jacobian = if self.n() <= MATERIALIZE_LIMIT {
            let h = self.hat.matrix()?;
            let mut j = (DMatrix::identity(self.n(), self.n()) - h) * c;
            j += &w0 * r.transpose();
            Some(j)
        } else {
            None
        };
        Ok(GradF {
            jacobian,
            a0_dot_h: c,
            frob_sq: c * c * f + 2.0 * c * q + ww * r.norm_squared(),
            trace_sq: c * c * f + 2.0 * c * q + t * t,
            divergence: c * (self.n() as f64 - self.df) + t,
        })
    }

    /// V*(θ) = ‖r‖² + tr[(∇f(z0))²] as an explicit quadratic in θ.
    pub fn v_star(&self, dir: &Direction) -> Quadratic {
        let (w0, _) = self.w0(dir);
        let (q, t, _) = self.cross_terms(&w0);
        let f = self.frob_i_minus_h_sq;
        let a = dir.a0.dot(&self.fit.beta_hat);
        // with u = a − θ: ‖r‖² + t² + 2qu + f u²
        Quadratic { c2: f, c1: -2.0 * q - 2.0 * f * a, c0: self.residual_norm_sq() + t * t + 2.0 * q * a + f * a * a }
    }

    pub fn report(&self, dir: &Direction, cov: &CovarianceSpec) -> Result<DebiasReport> {
        let (w0, interpolating) = self.w0(dir);
        let mut warnings = self.hat.warnings.clone();
        if interpolating {
            warnings.push("interpolating fit: w0 set to 0".into());
        }
        Ok(DebiasReport {
            df: self.df,
            frob_i_minus_h_sq: self.frob_i_minus_h_sq,
            w0_dot_residual: w0.dot(self.residual()),
            beta_debias: self.debias_vector(cov)?,
            theta_hat: self.theta_hat(dir)?,
            w0,
            interpolating,
            warnings,
        })
    }
}

pub fn grad_f_z0(
    fit: &FitResult,
    pen: &Penalty,
    dir: &Direction,
    instance: &RegressionInstance,
    theta: Option<f64>,
) -> Result<GradF> {
    Debiased::new(instance, fit, pen)?.grad_f_z0(dir, theta)
}

pub fn debias_vector(
    fit: &FitResult,
    pen: &Penalty,
    instance: &RegressionInstance,
    cov: &CovarianceSpec,
) -> Result<DVector<f64>> {
    Debiased::new(instance, fit, pen)?.debias_vector(cov)
}

pub fn theta_hat(fit: &FitResult, dir: &Direction, pen: &Penalty, instance: &RegressionInstance) -> Result<f64> {
    Debiased::new(instance, fit, pen)?.theta_hat(dir)
}

pub fn default_fd_step(y: &DVector<f64>) -> f64 {
    1e-6 * (1.0 + y.amax())
}

/// Central-difference derivative of `y ↦ Xβ̂(y)`; row i of the result is
/// the derivative along eᵢ, so the returned matrix is Ĥᵀ (= Ĥ when the
/// closed form holds).
///
/// A support change between `y ± step·eᵢ` triggers up to three retries
/// with the step divided by 10.
pub fn finite_diff_h(instance: &RegressionInstance, pen: &Penalty, step: Option<f64>) -> Result<DMatrix<f64>> {
    let opts = FitOptions { tol: 1e-11, max_iter: 1_000_000 };
    let base = penalty::fit_with(instance, pen, opts, None)?;
    let n = instance.n();
    let step0 = step.unwrap_or_else(|| default_fd_step(&instance.y));
    let mut out = DMatrix::zeros(n, n);
    let mut perturbed = instance.clone();
    for i in 0..n {
        let mut h = step0;
        let mut done = false;
        for _attempt in 0..4 {
            perturbed.y[i] = instance.y[i] + h;
            let plus = penalty::fit_with(&perturbed, pen, opts, Some(&base.beta_hat))?;
            perturbed.y[i] = instance.y[i] - h;
            let minus = penalty::fit_with(&perturbed, pen, opts, Some(&base.beta_hat))?;
            perturbed.y[i] = instance.y[i];
            if same_support(&plus, &base) && same_support(&minus, &base) {
                let d = &instance.x * (plus.beta_hat - minus.beta_hat) / (2.0 * h);
                out.set_row(i, &d.transpose());
                done = true;
                break;
            }
            h /= 10.0;
        }
        if !done {
            return Err(Error::NonsmoothPoint(format!("support changes around y along coordinate {i}")));
        }
    }
    Ok(out)
}

pub(crate) fn same_support(a: &FitResult, b: &FitResult) -> bool {
    a.active == b.active && a.active_groups == b.active_groups
}

#[cfg(test)]
mod tests;
