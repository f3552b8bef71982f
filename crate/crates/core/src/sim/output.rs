//! CSV emission: per-replication records, aggregates and QQ pairs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::inference::VarianceKind;
use crate::normal;

use super::{Aggregate, ExperimentResult, RepRecord};

pub const REPS_FILE: &str = "reps.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const QQ_FILE: &str = "qq.csv";

pub const REPS_HEADER: &[&str] = &[
    "rep",
    "penalty_id",
    "lambda",
    "direction_id",
    "df",
    "active_size",
    "theta_hat",
    "pivot_resid",
    "pivot_vhat",
    "pivot_vcheck",
    "ci_narrow_lo",
    "ci_narrow_hi",
    "ci_spike_lo",
    "ci_spike_hi",
    "ci_quad_lo",
    "ci_quad_hi",
    "ci_quad_valid",
    "pred_err",
    "dir_err_sq",
    "diag_item_v",
    "w0_dot_r",
    "pivot_vstar",
    "theta",
    "diag_item_iv",
    "tau_hat_sq",
];

pub const AGGREGATE_HEADER: &[&str] = &[
    "penalty_id",
    "penalty",
    "lambda",
    "direction_id",
    "used",
    "failures",
    "low_rep",
    "pivot_sd_resid",
    "pivot_sd_vhat",
    "pivot_sd_vcheck",
    "pivot_sd_vstar",
    "pivot_mean_resid",
    "pivot_mean_vhat",
    "pivot_mean_vcheck",
    "pivot_mean_vstar",
    "ks_resid",
    "ks_vhat",
    "ks_vcheck",
    "ks_vstar",
    "coverage_narrow",
    "coverage_spike",
    "coverage_quad",
    "mean_width_narrow",
    "mean_width_spike",
    "mean_width_quad",
    "quad_invalid_rate",
    "tau_hat_sq_mean",
    "pred_err_mean",
    "pred_err_sd",
    "dir_err_sq_mean",
    "dir_err_sq_sd",
    "df_mean",
    "item_iv_median",
    "sparsity_rate",
];

/// Shortest representation that parses back to the same f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

fn rep_row(r: &RepRecord) -> Vec<String> {
    let f = fmt_f64;
    vec![
        r.rep.to_string(),
        r.penalty_id.to_string(),
        f(r.lambda),
        r.direction_id.to_string(),
        f(r.df),
        r.active_size.to_string(),
        f(r.theta_hat),
        f(r.pivot_resid),
        f(r.pivot_vhat),
        f(r.pivot_vcheck),
        f(r.ci_narrow.0),
        f(r.ci_narrow.1),
        f(r.ci_spike.0),
        f(r.ci_spike.1),
        f(r.ci_quad.0),
        f(r.ci_quad.1),
        (r.ci_quad_valid as u8).to_string(),
        f(r.pred_err),
        f(r.dir_err_sq),
        f(r.diag_item_v),
        f(r.w0_dot_r),
        f(r.pivot_vstar),
        f(r.theta),
        f(r.diag_item_iv),
        f(r.tau_hat_sq),
    ]
}

fn aggregate_row(a: &Aggregate) -> Vec<String> {
    let f = fmt_f64;
    let mut row = vec![
        a.penalty_id.to_string(),
        a.penalty.clone(),
        f(a.lambda),
        a.direction_id.to_string(),
        a.used.to_string(),
        a.failures.to_string(),
        (a.low_rep as u8).to_string(),
    ];
    row.extend(a.pivot_sd.iter().map(|&v| f(v)));
    row.extend(a.pivot_mean.iter().map(|&v| f(v)));
    row.extend(a.ks.iter().map(|&v| f(v)));
    row.extend(a.coverage.iter().map(|&v| f(v)));
    row.extend(a.mean_width.iter().map(|&v| f(v)));
    row.extend(
        [
            a.quad_invalid_rate,
            a.tau_hat_sq_mean,
            a.pred_err_mean,
            a.pred_err_sd,
            a.dir_err_sq_mean,
            a.dir_err_sq_sd,
            a.df_mean,
            a.item_iv_median,
            a.sparsity_rate,
        ]
        .iter()
        .map(|&v| f(v)),
    );
    row
}

pub fn write_reps(records: &[RepRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(REPS_HEADER)?;
    for r in records {
        w.write_record(rep_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregates(aggs: &[Aggregate], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for a in aggs {
        w.write_record(aggregate_row(a))?;
    }
    w.flush()?;
    Ok(())
}

/// (theoretical quantile, order statistic) pairs of the chosen pivot.
pub fn write_qq(result: &ExperimentResult, v0: VarianceKind, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["penalty_id", "direction_id", "v0", "theoretical_quantile", "order_statistic"])?;
    for a in &result.aggregates {
        let mut v: Vec<f64> = result
            .records
            .iter()
            .filter(|r| r.penalty_id == a.penalty_id && r.direction_id == a.direction_id)
            .map(|r| r.pivot(v0))
            .filter(|x| x.is_finite())
            .collect();
        v.sort_by(f64::total_cmp);
        let m = v.len() as f64;
        for (i, x) in v.iter().enumerate() {
            let q = normal::quantile((i as f64 + 0.5) / m);
            w.write_record([
                a.penalty_id.to_string(),
                a.direction_id.to_string(),
                v0.name().to_string(),
                fmt_f64(q),
                fmt_f64(*x),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the three CSV files into `dir`, creating it if needed.
pub fn write_results(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = [REPS_FILE, AGGREGATE_FILE, QQ_FILE].iter().map(|f| dir.join(f)).collect();
    write_reps(&result.records, &paths[0])?;
    write_aggregates(&result.aggregates, &paths[1])?;
    write_qq(result, result.config.mc.v0, &paths[2])?;
    Ok(paths)
}
