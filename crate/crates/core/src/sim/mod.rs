//! Monte Carlo harness: fixed (β, Σ), fresh (X, ε) per replication.

pub mod config;
pub mod oracle;
pub mod output;

use nalgebra::DVector;

use crate::debias::Debiased;
use crate::error::{Error, Result};
use crate::inference::{mean_sd, median, CiKind, VarianceKind};
use crate::model::{normalize_direction, sample_design_with, CovarianceSpec, Direction, RegressionInstance, Truth};
use crate::normal;
use crate::parallel;
use crate::penalty::{self, FitOptions, FitResult, Penalty};
use crate::rng;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use oracle::{oracle_beta_star, Oracle};
pub use output::write_results;

/// Replications that may fail before the experiment is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Below this many usable replications aggregates are flagged.
pub const LOW_REP: usize = 20;

/// Per (replication, penalty, direction) record. Quantities that require
/// n − d̂f > 0 are NaN when the correction is degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub penalty_id: usize,
    pub lambda: f64,
    pub direction_id: usize,
    pub df: f64,
    pub active_size: usize,
    pub theta: f64,
    pub theta_hat: f64,
    pub pivot_resid: f64,
    pub pivot_vhat: f64,
    pub pivot_vcheck: f64,
    pub pivot_vstar: f64,
    pub ci_narrow: (f64, f64),
    pub ci_spike: (f64, f64),
    pub ci_quad: (f64, f64),
    pub ci_quad_valid: bool,
    /// ‖Σ^{1/2}h‖².
    pub pred_err: f64,
    /// ⟨a0, h⟩².
    pub dir_err_sq: f64,
    /// ⟨z0, r⟩² / (n‖r‖²).
    pub diag_item_v: f64,
    /// n⟨a0, h⟩² / ‖r‖².
    pub diag_item_iv: f64,
    pub w0_dot_r: f64,
    /// (1 − d̂f/n)^{-2}‖r‖²/n.
    pub tau_hat_sq: f64,
}

impl RepRecord {
    pub fn pivot(&self, k: VarianceKind) -> f64 {
        match k {
            VarianceKind::Resid => self.pivot_resid,
            VarianceKind::Vhat => self.pivot_vhat,
            VarianceKind::Vcheck => self.pivot_vcheck,
            VarianceKind::Vstar => self.pivot_vstar,
        }
    }

    pub fn ci(&self, k: CiKind) -> Option<(f64, f64)> {
        let ci = match k {
            CiKind::Narrow => self.ci_narrow,
            CiKind::Spike => self.ci_spike,
            CiKind::Quadratic if !self.ci_quad_valid => return None,
            CiKind::Quadratic => self.ci_quad,
        };
        (ci.0.is_finite() && ci.1.is_finite()).then_some(ci)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub penalty_id: usize,
    pub penalty: String,
    pub lambda: f64,
    pub direction_id: usize,
    /// Records with a usable correction.
    pub used: usize,
    pub failures: usize,
    pub low_rep: bool,
    pub pivot_mean: [f64; 4],
    pub pivot_sd: [f64; 4],
    pub ks: [f64; 4],
    /// narrow, spike, quadratic; an unbounded quadratic set counts as a miss.
    pub coverage: [f64; 3],
    pub mean_width: [f64; 3],
    pub quad_invalid_rate: f64,
    pub tau_hat_sq_mean: f64,
    pub pred_err_mean: f64,
    pub pred_err_sd: f64,
    pub dir_err_sq_mean: f64,
    pub dir_err_sq_sd: f64,
    pub df_mean: f64,
    pub item_iv_median: f64,
    /// Fraction of replications with |Ŝ| ≤ n/2.
    pub sparsity_rate: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub penalty_labels: Vec<String>,
    pub records: Vec<RepRecord>,
    pub failures: Vec<usize>,
    pub aggregates: Vec<Aggregate>,
}

/// Everything fixed across replications.
pub struct Prepared {
    pub truth: Truth,
    pub penalties: Vec<Penalty>,
    /// Each family's penalty ids from largest to smallest tuning parameter.
    pub chains: Vec<Vec<usize>>,
    pub directions: Vec<Direction>,
    pub opts: FitOptions,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let beta = config.beta();
    let cov = config.covariance(&beta)?;
    let grid = config.penalties()?;
    let mut chains: Vec<Vec<usize>> = vec![Vec::new(); config.penalty.len()];
    for (id, (family, _)) in grid.iter().enumerate() {
        chains[*family].push(id);
    }
    for chain in &mut chains {
        chain.sort_by(|&a, &b| grid[b].1.tuning().total_cmp(&grid[a].1.tuning()));
    }
    let penalties: Vec<Penalty> = grid.into_iter().map(|(_, p)| p).collect();
    // a0 and u0 depend only on Σ; z0 is rebound per replication
    let probe = nalgebra::DMatrix::zeros(1, config.model.p);
    let directions =
        config.directions(&cov).iter().map(|a| normalize_direction(a, &cov, &probe)).collect::<Result<Vec<_>>>()?;
    let truth = Truth { beta, sigma: config.model.sigma, cov };
    let opts = FitOptions { tol: config.mc.tol, max_iter: config.mc.max_iter };
    Ok(Prepared { truth, penalties, chains, directions, opts })
}

pub fn simulate_instance(prep: &Prepared, n: usize, master: rng::Seed, rep: usize) -> RegressionInstance {
    let mut r = rng::child_rng(master, rep as u64);
    let x = sample_design_with(&prep.truth.cov, n, &mut r);
    let eps = rng::normal_vector(&mut r, n);
    let y = &x * &prep.truth.beta + eps * prep.truth.sigma;
    RegressionInstance { y, x, truth: Some(prep.truth.clone()) }
}

/// Records for one replication; `Err` entries mark failed penalties.
pub fn run_rep(prep: &Prepared, config: &ExperimentConfig, rep: usize) -> Vec<Result<Vec<RepRecord>>> {
    let inst = simulate_instance(prep, config.model.n, config.mc.seed, rep);
    let dirs: Vec<Direction> = prep.directions.iter().map(|d| d.rebind(&inst.x)).collect();
    let mut out: Vec<Option<Result<Vec<RepRecord>>>> = (0..prep.penalties.len()).map(|_| None).collect();
    for chain in &prep.chains {
        let mut warm: Option<DVector<f64>> = None;
        for &id in chain {
            let pen = &prep.penalties[id];
            let res = penalty::fit_with(&inst, pen, prep.opts, warm.as_ref()).and_then(|fit| {
                warm = Some(fit.beta_hat.clone());
                records_for_fit(&inst, &fit, pen, &dirs, &prep.truth, rep, id, config.mc.alpha)
            });
            out[id] = Some(res);
        }
    }
    out.into_iter().map(|r| r.expect("every penalty belongs to a chain")).collect()
}

#[allow(clippy::too_many_arguments)]
fn records_for_fit(
    inst: &RegressionInstance,
    fit: &FitResult,
    pen: &Penalty,
    dirs: &[Direction],
    truth: &Truth,
    rep: usize,
    penalty_id: usize,
    alpha: f64,
) -> Result<Vec<RepRecord>> {
    let ctx = Debiased::new(inst, fit, pen)?;
    let n = inst.n() as f64;
    let h = &fit.beta_hat - &truth.beta;
    let pred_err = truth.cov.quad_form(&h);
    let r2 = ctx.residual_norm_sq();
    let tau_hat_sq = r2 / n / (1.0 - ctx.df / n).powi(2);
    let nan2 = (f64::NAN, f64::NAN);
    let mut records = Vec::with_capacity(dirs.len());
    for (direction_id, dir) in dirs.iter().enumerate() {
        let theta = dir.a0.dot(&truth.beta);
        let a0h = dir.a0.dot(&h);
        let (w0, _) = ctx.w0(dir);
        let b = dir.z0.dot(&fit.residual);
        let mut rec = RepRecord {
            rep,
            penalty_id,
            lambda: pen.tuning(),
            direction_id,
            df: ctx.df,
            active_size: fit.active.len(),
            theta,
            theta_hat: f64::NAN,
            pivot_resid: f64::NAN,
            pivot_vhat: f64::NAN,
            pivot_vcheck: f64::NAN,
            pivot_vstar: f64::NAN,
            ci_narrow: nan2,
            ci_spike: nan2,
            ci_quad: nan2,
            ci_quad_valid: false,
            pred_err,
            dir_err_sq: a0h * a0h,
            diag_item_v: b * b / (n * r2),
            diag_item_iv: n * a0h * a0h / r2,
            w0_dot_r: w0.dot(&fit.residual),
            tau_hat_sq,
        };
        if ctx.n_minus_df().is_ok() {
            rec.theta_hat = ctx.theta_hat(dir)?;
            let pv = |k| match ctx.pivot(dir, theta, k) {
                Ok(v) => Ok(v),
                Err(Error::InvalidVariance(_)) => Ok(f64::NAN),
                Err(e) => Err(e),
            };
            rec.pivot_resid = pv(VarianceKind::Resid)?;
            rec.pivot_vhat = pv(VarianceKind::Vhat)?;
            rec.pivot_vcheck = pv(VarianceKind::Vcheck)?;
            rec.pivot_vstar = pv(VarianceKind::Vstar)?;
            let nar = ctx.ci_narrow(dir, alpha)?;
            let spk = ctx.ci_spike(dir, alpha)?;
            let quad = ctx.ci_quadratic(dir, alpha)?;
            rec.ci_narrow = (nar.lo, nar.hi);
            rec.ci_spike = (spk.lo, spk.hi);
            rec.ci_quad = (quad.lo, quad.hi);
            rec.ci_quad_valid = quad.valid;
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let prep = prepare(config)?;
    let reps = config.mc.reps;
    let per_rep = parallel::map(reps, |rep| run_rep(&prep, config, rep));
    let mut failures = vec![0usize; prep.penalties.len()];
    let mut records = Vec::new();
    for rep_out in per_rep {
        for (id, res) in rep_out.into_iter().enumerate() {
            match res {
                Ok(rs) => records.extend(rs),
                Err(_) => failures[id] += 1,
            }
        }
    }
    let failed = failures.iter().copied().max().unwrap_or(0);
    if failed as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(Error::TooManyFailures { failed, total: reps });
    }
    let labels: Vec<String> = prep.penalties.iter().map(penalty_label).collect();
    let aggregates = aggregate(&records, &prep, &labels, &failures, config.model.n);
    Ok(ExperimentResult { config: config.clone(), penalty_labels: labels, records, failures, aggregates })
}

pub fn penalty_label(p: &Penalty) -> String {
    match p {
        Penalty::Lasso { lambda } => format!("lasso(lambda={lambda})"),
        Penalty::ElasticNet { lambda, mu } => format!("elastic_net(lambda={lambda},mu={mu})"),
        Penalty::Ridge { mu } => format!("ridge(mu={mu})"),
        Penalty::GroupLasso { groups, lambdas } => {
            format!("group_lasso(lambda={},groups={})", lambdas.first().copied().unwrap_or(f64::NAN), groups.len())
        }
        Penalty::Smooth(s) => format!("smooth(mu={})", s.strong_convexity),
    }
}

fn finite(v: impl Iterator<Item = f64>) -> Vec<f64> {
    v.filter(|x| x.is_finite()).collect()
}

/// Fraction of records with |Ŝ| ≤ κn/2.
pub fn sparsity_condition_check(records: &[&RepRecord], kappa: f64, n: usize) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    let ok = records.iter().filter(|r| r.active_size as f64 <= kappa * n as f64 / 2.0).count();
    ok as f64 / records.len() as f64
}

fn aggregate(
    records: &[RepRecord],
    prep: &Prepared,
    labels: &[String],
    failures: &[usize],
    n: usize,
) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for (pid, pen) in prep.penalties.iter().enumerate() {
        for did in 0..prep.directions.len() {
            let rs: Vec<&RepRecord> = records.iter().filter(|r| r.penalty_id == pid && r.direction_id == did).collect();
            let used = rs.iter().filter(|r| r.theta_hat.is_finite()).count();
            let mut pivot_mean = [f64::NAN; 4];
            let mut pivot_sd = [f64::NAN; 4];
            let mut ks = [f64::NAN; 4];
            for (i, k) in VarianceKind::ALL.into_iter().enumerate() {
                let v = finite(rs.iter().map(|r| r.pivot(k)));
                (pivot_mean[i], pivot_sd[i]) = mean_sd(&v);
                if v.len() >= LOW_REP {
                    ks[i] = normal::ks_normal(&v);
                }
            }
            let mut coverage = [f64::NAN; 3];
            let mut mean_width = [f64::NAN; 3];
            let eligible: Vec<&&RepRecord> = rs.iter().filter(|r| r.theta_hat.is_finite()).collect();
            for (i, k) in CiKind::ALL.into_iter().enumerate() {
                if eligible.is_empty() {
                    continue;
                }
                let hits =
                    eligible.iter().filter(|r| r.ci(k).is_some_and(|(lo, hi)| lo <= r.theta && r.theta <= hi)).count();
                coverage[i] = hits as f64 / eligible.len() as f64;
                let widths: Vec<f64> = eligible.iter().filter_map(|r| r.ci(k).map(|(lo, hi)| hi - lo)).collect();
                mean_width[i] = mean_sd(&widths).0;
            }
            let quad_invalid_rate = if eligible.is_empty() {
                f64::NAN
            } else {
                eligible.iter().filter(|r| !r.ci_quad_valid).count() as f64 / eligible.len() as f64
            };
            let (pred_err_mean, pred_err_sd) = mean_sd(&finite(rs.iter().map(|r| r.pred_err)));
            let (dir_err_sq_mean, dir_err_sq_sd) = mean_sd(&finite(rs.iter().map(|r| r.dir_err_sq)));
            out.push(Aggregate {
                penalty_id: pid,
                penalty: labels[pid].clone(),
                lambda: pen.tuning(),
                direction_id: did,
                used,
                failures: failures[pid],
                low_rep: used < LOW_REP,
                pivot_mean,
                pivot_sd,
                ks,
                coverage,
                mean_width,
                quad_invalid_rate,
                tau_hat_sq_mean: mean_sd(&finite(rs.iter().map(|r| r.tau_hat_sq))).0,
                pred_err_mean,
                pred_err_sd,
                dir_err_sq_mean,
                dir_err_sq_sd,
                df_mean: mean_sd(&finite(rs.iter().map(|r| r.df))).0,
                item_iv_median: median(&finite(rs.iter().map(|r| r.diag_item_iv))),
                sparsity_rate: sparsity_condition_check(&rs, 1.0, n),
            });
        }
    }
    out
}

/// Covariance helper for callers that need Σ without running anything.
pub fn covariance_of(config: &ExperimentConfig) -> Result<CovarianceSpec> {
    config.covariance(&config.beta())
}
