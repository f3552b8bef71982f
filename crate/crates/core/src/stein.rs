//! Toolbox for ξ = zᵀf(z) − div f(z) with z ~ N(0, I_n): Stein identities,
//! normal-approximation diagnostics and the two-term variance estimator.

use nalgebra::{DMatrix, DVector};

use crate::debias::{Debiased, MATERIALIZE_LIMIT};
use crate::error::{Error, Result};
use crate::model::{decompose_design, CovarianceSpec, Direction, RegressionInstance, Truth};
use crate::normal;
use crate::parallel;
use crate::penalty::{self, FitOptions, FitResult, Penalty};
use crate::rng::{self, Seed};

/// Largest n for which the mean Jacobian Ā is accumulated.
pub const MEAN_JACOBIAN_LIMIT: usize = 500;

/// Replications per reduction chunk; fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 250;

pub trait SteinFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> String;
    fn eval(&self, z: &DVector<f64>) -> Result<DVector<f64>>;

    /// Analytic (almost everywhere) Jacobian with entries ∂fᵢ/∂zⱼ.
    fn jacobian(&self, _z: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        None
    }

    /// f and its Jacobian together, for functions where both share work.
    fn eval_with_jacobian(&self, z: &DVector<f64>) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let f = self.eval(z)?;
        let j = self.jacobian(z).transpose()?;
        Ok((f, j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceMode {
    /// Analytic Jacobian when the function provides one, else differences.
    #[default]
    Auto,
    FiniteDifference,
}

pub fn fd_step(zi: f64) -> f64 {
    1e-5 * (1.0 + zi.abs())
}

/// Central-difference Jacobian; the n function pairs that give the
/// divergence give every column as well.
pub fn fd_jacobian(sf: &dyn SteinFunction, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = z.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut zz = z.clone();
    for j in 0..n {
        let h = fd_step(z[j]);
        zz[j] = z[j] + h;
        let fp = sf.eval(&zz)?;
        zz[j] = z[j] - h;
        let fm = sf.eval(&zz)?;
        zz[j] = z[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// f(z) and ∇f(z) under the given mode.
pub fn evaluate(
    sf: &dyn SteinFunction,
    z: &DVector<f64>,
    mode: DivergenceMode,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if z.len() != sf.dim() {
        return Err(Error::Dimension(format!("z has length {}, function expects {}", z.len(), sf.dim())));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite z".into()));
    }
    match mode {
        DivergenceMode::Auto => match sf.eval_with_jacobian(z)? {
            (f, Some(j)) => Ok((f, j)),
            (f, None) => Ok((f, fd_jacobian(sf, z)?)),
        },
        DivergenceMode::FiniteDifference => Ok((sf.eval(z)?, fd_jacobian(sf, z)?)),
    }
}

fn trace_of_square(j: &DMatrix<f64>) -> f64 {
    j.component_mul(&j.transpose()).sum()
}

fn sym_frob_sq(j: &DMatrix<f64>) -> f64 {
    0.5 * (j.norm_squared() + trace_of_square(j))
}

pub fn xi_with(sf: &dyn SteinFunction, z: &DVector<f64>, mode: DivergenceMode) -> Result<f64> {
    let (f, j) = evaluate(sf, z, mode)?;
    let div = j.trace();
    if !div.is_finite() {
        return Err(Error::NonsmoothEvaluation);
    }
    Ok(z.dot(&f) - div)
}

/// zᵀf(z) − tr ∇f(z).
pub fn xi(sf: &dyn SteinFunction, z: &DVector<f64>) -> Result<f64> {
    xi_with(sf, z, DivergenceMode::Auto)
}

/// ‖f(z)‖² + tr[(∇f(z))²], unbiased for Var[ξ].
pub fn variance_estimator(sf: &dyn SteinFunction, z: &DVector<f64>) -> Result<f64> {
    let (f, j) = evaluate(sf, z, DivergenceMode::Auto)?;
    Ok(f.norm_squared() + trace_of_square(&j))
}

/// Largest |difference| between analytic and finite-difference divergences
/// over `probes` standard normal points, relative to 1 + |analytic|.
pub fn check_divergence(sf: &dyn SteinFunction, probes: usize, seed: Seed) -> Result<Option<f64>> {
    let mut r = rng::rng(seed);
    let mut worst: Option<f64> = None;
    for _ in 0..probes {
        let z = rng::normal_vector(&mut r, sf.dim());
        let Some(j) = sf.jacobian(&z).transpose()? else {
            return Ok(None);
        };
        let fd = fd_jacobian(sf, &z)?;
        let a = j.trace();
        let err = (a - fd.trace()).abs() / (1.0 + a.abs());
        worst = Some(worst.map_or(err, |w| w.max(err)));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
struct Accum {
    m: usize,
    xi: f64,
    xi2: f64,
    xi4: f64,
    v: f64,
    v2: f64,
    diff: f64,
    diff2: f64,
    fsq: f64,
    tr_sq: f64,
    frob: f64,
    sym_frob: f64,
    f: DVector<f64>,
    jac: Option<DMatrix<f64>>,
    jac_sym_sq: f64,
    studentized: Vec<f64>,
}

impl Accum {
    fn new(n: usize) -> Self {
        Self {
            m: 0,
            xi: 0.0,
            xi2: 0.0,
            xi4: 0.0,
            v: 0.0,
            v2: 0.0,
            diff: 0.0,
            diff2: 0.0,
            fsq: 0.0,
            tr_sq: 0.0,
            frob: 0.0,
            sym_frob: 0.0,
            f: DVector::zeros(n),
            jac: (n <= MEAN_JACOBIAN_LIMIT).then(|| DMatrix::zeros(n, n)),
            jac_sym_sq: 0.0,
            studentized: Vec::new(),
        }
    }

    fn push(&mut self, z: &DVector<f64>, f: DVector<f64>, j: DMatrix<f64>) -> Result<()> {
        let div = j.trace();
        if !div.is_finite() {
            return Err(Error::NonsmoothEvaluation);
        }
        let x = z.dot(&f) - div;
        let fsq = f.norm_squared();
        let tsq = trace_of_square(&j);
        let v = fsq + tsq;
        let d = x * x - v;
        self.m += 1;
        self.xi += x;
        self.xi2 += x * x;
        self.xi4 += x * x * x * x;
        self.v += v;
        self.v2 += v * v;
        self.diff += d;
        self.diff2 += d * d;
        self.fsq += fsq;
        self.tr_sq += tsq;
        self.frob += j.norm_squared();
        let s = sym_frob_sq(&j);
        self.sym_frob += s;
        self.jac_sym_sq += s;
        self.f += f;
        if let Some(acc) = &mut self.jac {
            *acc += j;
        }
        self.studentized.push(if v > 0.0 { x / v.sqrt() } else { f64::NAN });
        Ok(())
    }

    fn merge(&mut self, o: Accum) {
        self.m += o.m;
        self.xi += o.xi;
        self.xi2 += o.xi2;
        self.xi4 += o.xi4;
        self.v += o.v;
        self.v2 += o.v2;
        self.diff += o.diff;
        self.diff2 += o.diff2;
        self.fsq += o.fsq;
        self.tr_sq += o.tr_sq;
        self.frob += o.frob;
        self.sym_frob += o.sym_frob;
        self.jac_sym_sq += o.jac_sym_sq;
        self.f += o.f;
        if let (Some(a), Some(b)) = (&mut self.jac, o.jac) {
            *a += b;
        }
        self.studentized.extend(o.studentized);
    }
}

/// Mean and its standard error from first and second moments.
fn mean_se(sum: f64, sum2: f64, m: usize) -> (f64, f64) {
    let mf = m as f64;
    let mean = sum / mf;
    let var = ((sum2 - mf * mean * mean) / (mf - 1.0)).max(0.0);
    (mean, (var / mf).sqrt())
}

fn simulate(sf: &dyn SteinFunction, reps: usize, seed: Seed, mode: DivergenceMode) -> Result<Accum> {
    let n = sf.dim();
    let chunks = reps.div_ceil(CHUNK);
    let parts = parallel::map(chunks, |c| -> Result<Accum> {
        let mut acc = Accum::new(n);
        for rep in c * CHUNK..((c + 1) * CHUNK).min(reps) {
            let z = rng::normal_vector(&mut rng::child_rng(seed, rep as u64), n);
            let (f, j) = evaluate(sf, &z, mode)?;
            acc.push(&z, f, j)?;
        }
        Ok(acc)
    });
    let mut total = Accum::new(n);
    for p in parts {
        total.merge(p?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderCheck {
    /// Monte Carlo E[ξ²] and its standard error.
    pub lhs: f64,
    pub lhs_se: f64,
    /// Monte Carlo E‖f‖² + E tr[(∇f)²] and its standard error.
    pub rhs: f64,
    pub rhs_se: f64,
    /// Paired z-score of lhs − rhs.
    pub z_score: f64,
    pub mean_xi: f64,
    pub mean_xi_se: f64,
}

impl SecondOrderCheck {
    fn from_accum(a: &Accum) -> Self {
        let (lhs, lhs_se) = mean_se(a.xi2, a.xi4, a.m);
        let (rhs, rhs_se) = mean_se(a.v, a.v2, a.m);
        let (dm, dse) = mean_se(a.diff, a.diff2, a.m);
        let (mean_xi, mean_xi_se) = mean_se(a.xi, a.xi2, a.m);
        let z_score = if dse > 0.0 {
            dm / dse
        } else if dm.abs() < 1e-12 * (1.0 + lhs.abs()) {
            0.0
        } else {
            f64::INFINITY.copysign(dm)
        };
        Self { lhs, lhs_se, rhs, rhs_se, z_score, mean_xi, mean_xi_se }
    }

    /// Both the first- and second-order identities hold within `k` ses.
    pub fn passes(&self, k: f64) -> bool {
        let first =
            if self.mean_xi_se > 0.0 { self.mean_xi.abs() <= k * self.mean_xi_se } else { self.mean_xi.abs() < 1e-10 };
        first && self.z_score.abs() <= k
    }
}

pub fn second_order_stein_check(sf: &dyn SteinFunction, reps: usize, seed: Seed) -> Result<SecondOrderCheck> {
    if reps < 100 {
        return Err(Error::InvalidInput(format!("second-order check needs reps >= 100, got {reps}")));
    }
    Ok(SecondOrderCheck::from_accum(&simulate(sf, reps, seed, DivergenceMode::Auto)?))
}

#[derive(Debug, Clone)]
pub struct SteinReport {
    pub name: String,
    pub n: usize,
    pub reps: usize,
    pub mc_mean_xi: f64,
    pub mc_var_xi: f64,
    /// E‖f‖².
    pub mean_fsq: f64,
    /// E tr[(∇f)²].
    pub mean_tr_grad_sq: f64,
    /// E‖∇f‖_F².
    pub mean_frob_grad_sq: f64,
    /// Monte Carlo mean of the variance estimator.
    pub mean_var_estimator: f64,
    pub mu_bar: DVector<f64>,
    /// Stored only for n up to [`MEAN_JACOBIAN_LIMIT`].
    pub a_bar: Option<DMatrix<f64>>,
    pub eps1_sq: f64,
    pub eps1_bar_sq: f64,
    pub eps12_sq: Option<f64>,
    pub eps12_bar_sq: Option<f64>,
    /// ‖Āˢ‖_op² / (‖μ̄‖² + ‖Āˢ‖_F²).
    pub quadratic_discriminant: Option<f64>,
    /// KS distance of ξ / (‖f‖² + tr[(∇f)²])^{1/2} to N(0, 1).
    pub ks_studentized: f64,
    pub second_order: SecondOrderCheck,
}

fn unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Unbiased estimate of ‖E v‖² from the sum of m draws and the sum of their
/// squared norms.
fn unbiased_sq_norm(sum_sq_norm: f64, sum_of_sq_norms: f64, m: usize) -> f64 {
    let mf = m as f64;
    (sum_sq_norm - sum_of_sq_norms) / (mf * (mf - 1.0))
}

pub fn approximation_report(sf: &dyn SteinFunction, reps: usize, seed: Seed) -> Result<SteinReport> {
    approximation_report_with(sf, reps, seed, DivergenceMode::Auto)
}

pub fn approximation_report_with(
    sf: &dyn SteinFunction,
    reps: usize,
    seed: Seed,
    mode: DivergenceMode,
) -> Result<SteinReport> {
    if reps < 1000 {
        return Err(Error::InvalidInput(format!("approximation report needs reps >= 1000, got {reps}")));
    }
    let a = simulate(sf, reps, seed, mode)?;
    let m = a.m as f64;
    let (mc_mean_xi, _) = mean_se(a.xi, a.xi2, a.m);
    let mc_var_xi = (a.xi2 - m * mc_mean_xi * mc_mean_xi) / (m - 1.0);
    if !(mc_var_xi > 0.0) {
        return Err(Error::Degenerate(format!("Monte Carlo variance of xi is {mc_var_xi}")));
    }
    let mu_sq = unbiased_sq_norm(a.f.norm_squared(), a.fsq, a.m).max(0.0);
    let e_sym = a.sym_frob / m;
    let eps1_sq = unit(1.0 - mu_sq / mc_var_xi);
    let eps1_bar_sq = unit(2.0 * e_sym / (mu_sq + 2.0 * e_sym));
    let mu_bar = &a.f / m;
    let a_bar = a.jac.as_ref().map(|j| j / m);
    let (eps12_sq, eps12_bar_sq, quadratic_discriminant) = match (&a.jac, &a_bar) {
        (Some(sum), Some(mean)) => {
            let sym_sum = (sum + sum.transpose()) * 0.5;
            let abar_sym_sq = unbiased_sq_norm(sym_sum.norm_squared(), a.jac_sym_sq, a.m).max(0.0);
            let eps12 = unit(1.0 - (mu_sq + 2.0 * abar_sym_sq) / mc_var_xi);
            let eps12_bar = unit(2.0 * (e_sym - abar_sym_sq).max(0.0) / (mu_sq + 2.0 * e_sym));
            let s = (mean + mean.transpose()) * 0.5;
            let op = s.symmetric_eigenvalues().amax();
            let denom = mu_bar.norm_squared() + s.norm_squared();
            let disc = if denom > 0.0 { op * op / denom } else { f64::NAN };
            (Some(eps12), Some(eps12_bar), Some(disc))
        }
        _ => (None, None, None),
    };
    let studentized: Vec<f64> = a.studentized.iter().copied().filter(|v| v.is_finite()).collect();
    let ks_studentized = if studentized.is_empty() { f64::NAN } else { normal::ks_normal(&studentized) };
    Ok(SteinReport {
        name: sf.name(),
        n: sf.dim(),
        reps,
        mc_mean_xi,
        mc_var_xi,
        mean_fsq: a.fsq / m,
        mean_tr_grad_sq: a.tr_sq / m,
        mean_frob_grad_sq: a.frob / m,
        mean_var_estimator: a.v / m,
        mu_bar,
        a_bar,
        eps1_sq,
        eps1_bar_sq,
        eps12_sq,
        eps12_bar_sq,
        quadratic_discriminant,
        ks_studentized,
        second_order: SecondOrderCheck::from_accum(&a),
    })
}

/// f(z) = μ.
#[derive(Debug, Clone)]
pub struct Constant(pub DVector<f64>);

impl SteinFunction for Constant {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn name(&self) -> String {
        "constant".into()
    }
    fn eval(&self, _z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
    fn jacobian(&self, _z: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(DMatrix::zeros(self.dim(), self.dim())))
    }
}

/// f(z) = Az.
#[derive(Debug, Clone)]
pub struct Linear {
    pub a: DMatrix<f64>,
    pub label: String,
}

impl SteinFunction for Linear {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn name(&self) -> String {
        self.label.clone()
    }
    fn eval(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * z)
    }
    fn jacobian(&self, _z: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(self.a.clone()))
    }
}

/// Coordinatewise soft-thresholding at `level`.
#[derive(Debug, Clone)]
pub struct SoftThreshold {
    pub n: usize,
    pub level: f64,
}

impl SteinFunction for SoftThreshold {
    fn dim(&self) -> usize {
        self.n
    }
    fn name(&self) -> String {
        "soft-threshold".into()
    }
    fn eval(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(z.map(|v| v.signum() * (v.abs() - self.level).max(0.0)))
    }
    fn jacobian(&self, z: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        let d = z.map(|v| if v.abs() > self.level { 1.0 } else { 0.0 });
        Some(Ok(DMatrix::from_diagonal(&d)))
    }
}

/// f(z) = μ(1 + ‖z‖²/n): nonlinear, yet ξ is close to the linear term zᵀμ.
#[derive(Debug, Clone)]
pub struct Radial(pub DVector<f64>);

impl SteinFunction for Radial {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn name(&self) -> String {
        "radial".into()
    }
    fn eval(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.0 * (1.0 + z.norm_squared() / self.dim() as f64))
    }
    fn jacobian(&self, z: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(&self.0 * z.transpose() * (2.0 / self.dim() as f64)))
    }
}

/// z0 ↦ Xβ̂ − y with (X Q0, ε) held fixed:
/// X(z) = XQ0 + z a0ᵀ and y(z) = y + (z − z0)θ.
pub struct RegressionAdapter {
    xq0: DMatrix<f64>,
    y_base: DVector<f64>,
    z0: DVector<f64>,
    dir: Direction,
    theta: f64,
    pen: Penalty,
    opts: FitOptions,
    warm: DVector<f64>,
}

impl RegressionAdapter {
    pub fn new(instance: &RegressionInstance, dir: &Direction, pen: Penalty, theta: f64) -> Result<Self> {
        let opts = FitOptions { tol: 1e-10, max_iter: 1_000_000 };
        let base = penalty::fit_with(instance, &pen, opts, None)?;
        let (z0, xq0) = decompose_design(&instance.x, dir);
        Ok(Self { xq0, y_base: instance.y.clone(), z0, dir: dir.clone(), theta, pen, opts, warm: base.beta_hat })
    }

    pub fn instance_at(&self, z: &DVector<f64>) -> Result<RegressionInstance> {
        let x = &self.xq0 + z * self.dir.a0.transpose();
        let y = &self.y_base + (z - &self.z0) * self.theta;
        RegressionInstance::new(y, x, None)
    }

    fn fit_at(&self, z: &DVector<f64>) -> Result<(RegressionInstance, FitResult)> {
        let inst = self.instance_at(z)?;
        let fit = penalty::fit_with(&inst, &self.pen, self.opts, Some(&self.warm))?;
        Ok((inst, fit))
    }
}

impl SteinFunction for RegressionAdapter {
    fn dim(&self) -> usize {
        self.z0.len()
    }
    fn name(&self) -> String {
        format!("regression-{}", self.pen.kind())
    }
    fn eval(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-self.fit_at(z)?.1.residual)
    }
    fn jacobian(&self, z: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(self.eval_with_jacobian(z).map(|(_, j)| j.expect("materialized for small n")))
    }
    fn eval_with_jacobian(&self, z: &DVector<f64>) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let (inst, fit) = self.fit_at(z)?;
        let f = -&fit.residual;
        if self.dim() > MATERIALIZE_LIMIT {
            return Ok((f, None));
        }
        let dir = Direction { a0: self.dir.a0.clone(), u0: self.dir.u0.clone(), z0: z.clone() };
        let g = Debiased::new(&inst, &fit, &self.pen)?.grad_f_z0(&dir, Some(self.theta))?;
        Ok((f, g.jacobian))
    }
}

pub const REGISTRY: &[&str] = &[
    "constant",
    "linear-identity",
    "linear-symmetric",
    "linear-asymmetric",
    "soft-threshold",
    "radial",
    "regression-lasso",
];

/// Tridiagonal symmetric matrix with unit diagonal and 1/2 off the diagonal.
fn symmetric_band(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => 1.0,
        1 => 0.5,
        _ => 0.0,
    })
}

/// Half the identity plus the upper shift.
fn upper_shift(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.5
        } else if j == i + 1 {
            1.0
        } else {
            0.0
        }
    })
}

/// Regression adapter for a simulated Lasso problem with p = n/2, Σ = I,
/// five unit coefficients and λ = (2 log p / n)^{1/2}.
pub fn regression_lasso(n: usize, seed: Seed) -> Result<RegressionAdapter> {
    let p = (n / 2).max(2);
    let mut beta = DVector::zeros(p);
    for j in 0..p.min(5) {
        beta[j] = 1.0;
    }
    let cov = CovarianceSpec::identity(p);
    let truth = Truth { beta: beta.clone(), sigma: 1.0, cov: cov.clone() };
    let inst = RegressionInstance::simulate(truth, n, &mut rng::rng(seed));
    let mut e1 = DVector::zeros(p);
    e1[0] = 1.0;
    let dir = crate::model::normalize_direction(&e1, &cov, &inst.x)?;
    let lambda = (2.0 * (p as f64).ln() / n as f64).sqrt();
    RegressionAdapter::new(&inst, &dir, Penalty::Lasso { lambda }, dir.a0.dot(&beta))
}

pub fn registry_function(name: &str, n: usize, seed: Seed) -> Result<Box<dyn SteinFunction>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be positive".into()));
    }
    let nf = n as f64;
    Ok(match name {
        "constant" => Box::new(Constant(DVector::from_element(n, (3.0 / nf).sqrt()))),
        "linear-identity" => Box::new(Linear { a: DMatrix::identity(n, n), label: name.into() }),
        "linear-symmetric" => Box::new(Linear { a: symmetric_band(n), label: name.into() }),
        "linear-asymmetric" => Box::new(Linear { a: upper_shift(n), label: name.into() }),
        "soft-threshold" => Box::new(SoftThreshold { n, level: 1.0 }),
        "radial" => Box::new(Radial(DVector::from_element(n, 1.0))),
        "regression-lasso" => Box::new(regression_lasso(n, seed)?),
        _ => {
            return Err(Error::InvalidInput(format!(
                "unknown test function '{name}', expected one of {}",
                REGISTRY.join(", ")
            )))
        }
    })
}
