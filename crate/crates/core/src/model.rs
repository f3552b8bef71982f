//! Problem representation: covariance, regression instances, Gaussian design
//! sampling, and the direction decomposition `X = X Q0 + z0 a0ᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Seed};

/// Known design covariance Σ together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovarianceSpec {
    sigma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl CovarianceSpec {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::Dimension("covariance must be a non-empty square matrix".into()));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariance has non-finite entries".into()));
        }
        let scale = sigma.amax();
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidInput(format!("covariance is not symmetric (max asymmetry {asym:e})")));
        }
        let chol = Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { sigma, chol })
    }

    pub fn identity(p: usize) -> Self {
        Self::new(DMatrix::identity(p, p)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower-triangular L with Σ = L Lᵀ.
    pub fn cholesky_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Σ⁻¹ v via the Cholesky factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// vᵀ Σ v = ‖Σ^{1/2} v‖².
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.sigma * v))
    }

    /// vᵀ Σ⁻¹ v = ‖Σ^{-1/2} v‖².
    pub fn inv_quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve(v))
    }

    pub fn operator_norm(&self) -> f64 {
        self.sigma.clone().symmetric_eigenvalues().max()
    }
}

/// Ground truth carried by simulated instances.
#[derive(Debug, Clone)]
pub struct Truth {
    pub beta: DVector<f64>,
    pub sigma: f64,
    pub cov: CovarianceSpec,
}

/// Observed `(y, X)` and, for simulations, the truth that generated them.
#[derive(Debug, Clone)]
pub struct RegressionInstance {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub truth: Option<Truth>,
}

impl RegressionInstance {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, truth: Option<Truth>) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::Dimension("design must have n >= 1 and p >= 1".into()));
        }
        if y.len() != n {
            return Err(Error::Dimension(format!("y has length {} but X has {n} rows", y.len())));
        }
        if let Some(t) = &truth {
            if t.beta.len() != p || t.cov.dim() != p {
                return Err(Error::Dimension(format!(
                    "truth has beta of length {} and covariance of size {}, expected {p}",
                    t.beta.len(),
                    t.cov.dim()
                )));
            }
            if !(t.sigma > 0.0) {
                return Err(Error::InvalidInput("noise sd must be positive".into()));
            }
        }
        Ok(Self { y, x, truth })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.x.iter().chain(self.y.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("NaN or Inf in data".into()))
        }
    }

    /// Draws `y = Xβ + σε` on a fresh design with rows iid N(0, Σ).
    pub fn simulate<R: Rng + ?Sized>(truth: Truth, n: usize, rng: &mut R) -> Self {
        let x = sample_design_with(&truth.cov, n, rng);
        let eps = rng::normal_vector(rng, n);
        let y = &x * &truth.beta + eps * truth.sigma;
        Self { y, x, truth: Some(truth) }
    }
}

/// `n x p` design with iid N(0, Σ) rows, deterministic in `seed`.
pub fn sample_design(cov: &CovarianceSpec, n: usize, seed: Seed) -> DMatrix<f64> {
    sample_design_with(cov, n, &mut rng::rng(seed))
}

/// Rows are G Lᵀ for G with iid standard normal entries.
pub fn sample_design_with<R: Rng + ?Sized>(cov: &CovarianceSpec, n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = rng::normal_matrix(rng, n, cov.dim());
    g * cov.cholesky_lower().transpose()
}

/// Normalized direction of interest and its design score.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    /// Direction with ‖Σ^{-1/2} a0‖ = 1.
    pub a0: DVector<f64>,
    /// Σ⁻¹a0 / ⟨a0, Σ⁻¹a0⟩, so ⟨a0, u0⟩ = 1.
    pub u0: DVector<f64>,
    /// X u0.
    pub z0: DVector<f64>,
}

pub fn normalize_direction(a: &DVector<f64>, cov: &CovarianceSpec, x: &DMatrix<f64>) -> Result<Direction> {
    if a.len() != cov.dim() || x.ncols() != a.len() {
        return Err(Error::Dimension(format!(
            "direction has length {}, covariance is {}x{0}, X has {} columns",
            a.len(),
            cov.dim(),
            x.ncols()
        )));
    }
    if a.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroDirection);
    }
    let sinv_a = cov.solve(a);
    let norm = a.dot(&sinv_a).sqrt();
    let a0 = a / norm;
    let sinv_a0 = sinv_a / norm;
    let u0 = &sinv_a0 / a0.dot(&sinv_a0);
    let z0 = x * &u0;
    Ok(Direction { a0, u0, z0 })
}

impl Direction {
    /// Recomputes `z0 = X u0` for a different design drawn with the same Σ.
    pub fn rebind(&self, x: &DMatrix<f64>) -> Direction {
        Direction { a0: self.a0.clone(), u0: self.u0.clone(), z0: x * &self.u0 }
    }
}

/// Returns `(z0, X Q0)` with `X Q0 = X (I − u0 a0ᵀ)`.
pub fn decompose_design(x: &DMatrix<f64>, dir: &Direction) -> (DVector<f64>, DMatrix<f64>) {
    let z0 = x * &dir.u0;
    let xq0 = x - &z0 * dir.a0.transpose();
    (z0, xq0)
}

/// Covariances used in the two reference experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum FigureCovariance {
    /// Σ⁻¹ = I + 0.9 s^{-1/2} (e₁ sgn(β)ᵀ + sgn(β) e₁ᵀ).
    Figure1 { s: usize, signs: Vec<f64> },
    /// Σ = W / (5p) with W = GᵀG, G a `dof x p` standard normal matrix.
    Figure2Wishart { p: usize, dof: usize, seed: Seed },
}

pub fn figure_covariances(kind: &FigureCovariance) -> Result<CovarianceSpec> {
    match kind {
        FigureCovariance::Figure1 { s, signs } => {
            if *s < 1 {
                return Err(Error::InvalidInput("figure1 requires s >= 1".into()));
            }
            if signs.iter().any(|v| ![-1.0, 0.0, 1.0].contains(v)) {
                return Err(Error::InvalidInput("sign vector entries must be -1, 0 or 1".into()));
            }
            let p = signs.len();
            if p == 0 {
                return Err(Error::Dimension("empty sign vector".into()));
            }
            let c = 0.9 / (*s as f64).sqrt();
            let mut prec = DMatrix::<f64>::identity(p, p);
            for j in 0..p {
                prec[(0, j)] += c * signs[j];
                prec[(j, 0)] += c * signs[j];
            }
            let chol = Cholesky::new(prec).ok_or(Error::NotPositiveDefinite)?;
            let inv = chol.inverse();
            let sigma = (&inv + inv.transpose()) * 0.5;
            CovarianceSpec::new(sigma)
        }
        FigureCovariance::Figure2Wishart { p, dof, seed } => {
            if dof < p {
                return Err(Error::InvalidInput(format!("Wishart needs dof >= p, got dof={dof}, p={p}")));
            }
            let g = rng::normal_matrix(&mut rng::rng(*seed), *dof, *p);
            let w = g.tr_mul(&g);
            let sigma = (&w + w.transpose()) * (0.5 / (5.0 * *p as f64));
            CovarianceSpec::new(sigma)
        }
    }
}
