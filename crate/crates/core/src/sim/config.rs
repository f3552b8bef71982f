//! TOML experiment configuration.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::VarianceKind;
use crate::model::{figure_covariances, CovarianceSpec, FigureCovariance};
use crate::penalty::{Groups, LogCosh, Penalty};
use crate::rng::{self, Seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub penalty: Vec<PenaltySpec>,
    #[serde(default)]
    pub directions: DirectionSpec,
    pub mc: McSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n: usize,
    pub p: usize,
    /// Noise standard deviation.
    pub sigma: f64,
    pub beta: BetaSpec,
    #[serde(default)]
    pub cov: CovSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSpec {
    Explicit {
        values: Vec<f64>,
    },
    /// First `head.len()` coordinates from `head`, the rest of the first `s`
    /// equal to `magnitude`, with independent random signs when requested.
    Sparse {
        s: usize,
        #[serde(default)]
        head: Vec<f64>,
        #[serde(default = "one")]
        magnitude: f64,
        #[serde(default)]
        random_signs: bool,
        #[serde(default)]
        seed: Seed,
    },
    /// The first `active_groups` contiguous groups of size `group_size`
    /// are set to `value`.
    Grouped {
        group_size: usize,
        active_groups: usize,
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovSpec {
    #[default]
    Identity,
    /// Σ⁻¹ = I + 0.9 s^{-1/2}(e1 sgn(β)ᵀ + sgn(β) e1ᵀ), with s = ‖β‖₀.
    Figure1,
    /// Σ = W / (5p), W Wishart(I, dof_factor·p).
    Figure2Wishart {
        #[serde(default = "five")]
        dof_factor: usize,
        seed: Seed,
    },
    Explicit {
        rows: Vec<Vec<f64>>,
    },
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Lasso,
    ElasticNet,
    Ridge,
    GroupLasso,
    LogCosh,
}

/// One penalty family with its tuning grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambdas: Vec<f64>,
    /// Ridge grid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mus: Vec<f64>,
    /// Fixed μ for elastic net and log-cosh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    /// Log-cosh smoothing width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSpec {
    /// 1-based coordinate indices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub canonical: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explicit: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_sphere: Option<RandomSphere>,
}

impl Default for DirectionSpec {
    fn default() -> Self {
        Self { canonical: vec![1], explicit: Vec::new(), random_sphere: None }
    }
}

/// Σ^{1/2}u for u uniform on the sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSphere {
    pub count: usize,
    pub seed: Seed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub reps: usize,
    pub seed: Seed,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Pivot written to the QQ file.
    #[serde(default = "default_v0")]
    pub v0: VarianceKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_v0() -> VarianceKind {
    VarianceKind::Resid
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    100_000
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)
        .map_err(|e| Error::Config { line: e.span().map(|s| line_of(text, s.start)), msg: e.message().to_owned() })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: None, msg });
        let m = &self.model;
        if m.n == 0 || m.p == 0 {
            return bad("model.n and model.p must be positive".into());
        }
        if !(m.sigma > 0.0 && m.sigma.is_finite()) {
            return bad(format!("model.sigma must be positive, got {}", m.sigma));
        }
        match &m.beta {
            BetaSpec::Explicit { values } if values.len() != m.p => {
                return bad(format!("beta has {} values, p = {}", values.len(), m.p));
            }
            BetaSpec::Sparse { s, head, .. } if *s > m.p || head.len() > *s => {
                return bad(format!("sparse beta needs head length <= s <= p (s = {s})"));
            }
            BetaSpec::Grouped { group_size, active_groups, .. }
                if *group_size == 0 || !m.p.is_multiple_of(*group_size) || active_groups * group_size > m.p =>
            {
                return bad("grouped beta needs group_size dividing p and enough groups".into());
            }
            _ => {}
        }
        if let CovSpec::Explicit { rows } = &m.cov {
            if rows.len() != m.p || rows.iter().any(|r| r.len() != m.p) {
                return bad(format!("explicit covariance must be {0}x{0}", m.p));
            }
        }
        if self.penalty.is_empty() {
            return bad("at least one [[penalty]] entry is required".into());
        }
        for (i, spec) in self.penalty.iter().enumerate() {
            if spec.tunings().is_empty() {
                let key = if spec.kind == PenaltyKind::Ridge { "mus" } else { "lambdas" };
                return bad(format!("penalty {i}: missing key '{key}'"));
            }
            for (key, needed) in [
                ("mu", matches!(spec.kind, PenaltyKind::ElasticNet | PenaltyKind::LogCosh) && spec.mu.is_none()),
                ("group_size", spec.kind == PenaltyKind::GroupLasso && spec.group_size.is_none()),
                ("delta", spec.kind == PenaltyKind::LogCosh && spec.delta.is_none()),
            ] {
                if needed {
                    return bad(format!("penalty {i}: missing key '{key}'"));
                }
            }
            for pen in spec.expand(m.p)? {
                pen.validate(m.p).map_err(|e| Error::Config { line: None, msg: format!("penalty {i}: {e}") })?;
            }
        }
        let d = &self.directions;
        if d.canonical.iter().any(|&j| j == 0 || j > m.p) {
            return bad(format!("canonical directions are 1-based indices in 1..={}", m.p));
        }
        if d.explicit.iter().any(|a| a.len() != m.p) {
            return bad(format!("explicit directions must have length {}", m.p));
        }
        if d.canonical.len() + d.explicit.len() + d.random_sphere.as_ref().map_or(0, |r| r.count) == 0 {
            return bad("no directions configured".into());
        }
        let mc = &self.mc;
        if mc.reps == 0 {
            return bad("mc.reps must be at least 1".into());
        }
        if !(mc.alpha > 0.0 && mc.alpha < 1.0) {
            return bad(format!("mc.alpha must lie in (0, 1), got {}", mc.alpha));
        }
        if !(mc.tol > 0.0) || mc.max_iter == 0 {
            return bad("mc.tol and mc.max_iter must be positive".into());
        }
        Ok(())
    }

    pub fn beta(&self) -> DVector<f64> {
        let p = self.model.p;
        match &self.model.beta {
            BetaSpec::Explicit { values } => DVector::from_column_slice(values),
            BetaSpec::Sparse { s, head, magnitude, random_signs, seed } => {
                let mut b = DVector::zeros(p);
                let mut r = rng::rng(*seed);
                for j in 0..*s {
                    b[j] = if j < head.len() {
                        head[j]
                    } else if *random_signs {
                        if r.random::<bool>() {
                            *magnitude
                        } else {
                            -*magnitude
                        }
                    } else {
                        *magnitude
                    };
                }
                b
            }
            BetaSpec::Grouped { group_size, active_groups, value } => {
                DVector::from_fn(p, |j, _| if j < group_size * active_groups { *value } else { 0.0 })
            }
        }
    }

    pub fn covariance(&self, beta: &DVector<f64>) -> Result<CovarianceSpec> {
        let p = self.model.p;
        match &self.model.cov {
            CovSpec::Identity => Ok(CovarianceSpec::identity(p)),
            CovSpec::Figure1 => {
                let signs: Vec<f64> = beta.iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }).collect();
                let s = signs.iter().filter(|&&v| v != 0.0).count();
                figure_covariances(&FigureCovariance::Figure1 { s, signs })
            }
            CovSpec::Figure2Wishart { dof_factor, seed } => {
                figure_covariances(&FigureCovariance::Figure2Wishart { p, dof: dof_factor * p, seed: *seed })
            }
            CovSpec::Explicit { rows } => CovarianceSpec::new(DMatrix::from_fn(p, p, |i, j| rows[i][j])),
        }
    }

    /// Unnormalized directions in output order.
    pub fn directions(&self, cov: &CovarianceSpec) -> Vec<DVector<f64>> {
        let p = self.model.p;
        let d = &self.directions;
        let mut out: Vec<DVector<f64>> =
            d.canonical.iter().map(|&j| DVector::from_fn(p, |i, _| if i + 1 == j { 1.0 } else { 0.0 })).collect();
        out.extend(d.explicit.iter().map(|a| DVector::from_column_slice(a)));
        if let Some(rs) = &d.random_sphere {
            let l = cov.cholesky_lower();
            let mut r = rng::rng(rs.seed);
            for _ in 0..rs.count {
                out.push(&l * rng::unit_sphere(&mut r, p));
            }
        }
        out
    }

    /// Expanded penalty grid, in config order.
    pub fn penalties(&self) -> Result<Vec<(usize, Penalty)>> {
        let mut out = Vec::new();
        for (family, spec) in self.penalty.iter().enumerate() {
            out.extend(spec.expand(self.model.p)?.into_iter().map(|p| (family, p)));
        }
        Ok(out)
    }
}

impl PenaltySpec {
    fn tunings(&self) -> &[f64] {
        if self.kind == PenaltyKind::Ridge {
            &self.mus
        } else {
            &self.lambdas
        }
    }

    pub fn expand(&self, p: usize) -> Result<Vec<Penalty>> {
        self.tunings()
            .iter()
            .map(|&t| {
                Ok(match self.kind {
                    PenaltyKind::Lasso => Penalty::Lasso { lambda: t },
                    PenaltyKind::ElasticNet => Penalty::ElasticNet { lambda: t, mu: self.mu.unwrap_or(f64::NAN) },
                    PenaltyKind::Ridge => Penalty::Ridge { mu: t },
                    PenaltyKind::GroupLasso => {
                        let size = self.group_size.unwrap_or(0);
                        if size == 0 || !p.is_multiple_of(size) {
                            return Err(Error::Config {
                                line: None,
                                msg: format!("group_size must be positive and divide p = {p}"),
                            });
                        }
                        Penalty::group_lasso_equal(Groups::from_sizes(&vec![size; p / size])?, t)
                    }
                    PenaltyKind::LogCosh => {
                        LogCosh { lambda: t, delta: self.delta.unwrap_or(f64::NAN), mu: self.mu.unwrap_or(f64::NAN) }
                            .penalty()
                    }
                })
            })
            .collect()
    }
}
