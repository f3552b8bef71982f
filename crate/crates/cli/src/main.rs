//! `debias`: fit, de-bias and build confidence intervals from CSV data, run
//! Monte Carlo experiments, and check Stein identities.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use debias_core::debias::Debiased;
use debias_core::inference::CiKind;
use debias_core::model::{normalize_direction, CovarianceSpec, RegressionInstance};
use debias_core::penalty::{self, FitOptions, FitResult, Groups, Penalty};
use debias_core::sim::{self, output};
use debias_core::stein;
use debias_core::{data, Error, Result};
use nalgebra::DVector;

#[derive(Parser)]
#[command(name = "debias", version, about = "De-biased estimation and inference for penalized linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a penalized regression and report the solution summary.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        /// Write β̂ to this CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Degrees of freedom, w0 and the de-biased estimate for one direction.
    Debias {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        dir: DirectionArgs,
        /// Write the de-biased vector to this CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Narrow, spike and quadratic confidence intervals for ⟨a0, β⟩.
    Ci {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        dir: DirectionArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Run a Monte Carlo experiment described by a TOML config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for reps.csv, aggregate.csv and qq.csv.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the replication count.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Monte Carlo check of the Stein identities for a registry function.
    SteinCheck {
        #[arg(long = "fn")]
        function: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Design matrix CSV with a header row.
    #[arg(long)]
    x: PathBuf,
    /// Response CSV with a single column and a header row.
    #[arg(long)]
    y: PathBuf,
    /// lasso, ridge, elastic-net or group-lasso.
    #[arg(long)]
    penalty: String,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Group sizes, either one size dividing p or a comma-separated list.
    #[arg(long)]
    groups: Option<String>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
}

#[derive(Args)]
struct DirectionArgs {
    /// Design covariance CSV (p x p); identity when omitted.
    #[arg(long)]
    cov: Option<PathBuf>,
    /// 1-based coordinate defining the direction e_j.
    #[arg(long, default_value_t = 1)]
    direction: usize,
}

fn need(v: Option<f64>, flag: &str, kind: &str) -> Result<f64> {
    v.ok_or_else(|| Error::InvalidInput(format!("--{flag} is required for --penalty {kind}")))
}

fn parse_groups(spec: &str, p: usize) -> Result<Groups> {
    let sizes: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::InvalidInput(format!("bad group size '{s}'"))))
        .collect::<Result<_>>()?;
    if sizes.len() == 1 {
        let s = sizes[0];
        if s == 0 || !p.is_multiple_of(s) {
            return Err(Error::InvalidInput(format!("group size {s} does not divide p = {p}")));
        }
        return Groups::from_sizes(&vec![s; p / s]);
    }
    Groups::from_sizes(&sizes)
}

impl ModelArgs {
    fn penalty(&self, p: usize) -> Result<Penalty> {
        let kind = self.penalty.as_str();
        let pen = match kind {
            "lasso" => Penalty::Lasso { lambda: need(self.lambda, "lambda", kind)? },
            "ridge" => Penalty::Ridge { mu: need(self.mu, "mu", kind)? },
            "elastic-net" | "elastic_net" => {
                Penalty::ElasticNet { lambda: need(self.lambda, "lambda", kind)?, mu: need(self.mu, "mu", kind)? }
            }
            "group-lasso" | "group_lasso" => {
                let spec = self
                    .groups
                    .as_deref()
                    .ok_or_else(|| Error::InvalidInput("--groups is required for --penalty group-lasso".into()))?;
                Penalty::group_lasso_equal(parse_groups(spec, p)?, need(self.lambda, "lambda", kind)?)
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown penalty '{other}', expected lasso, ridge, elastic-net or group-lasso"
                )))
            }
        };
        pen.validate(p)?;
        Ok(pen)
    }

    fn load(&self) -> Result<(RegressionInstance, Penalty, FitResult)> {
        let x = data::read_matrix(&self.x)?;
        let y = data::read_vector(&self.y)?;
        let inst = RegressionInstance::new(y, x, None)?;
        let pen = self.penalty(inst.p())?;
        let fit = penalty::fit_with(&inst, &pen, FitOptions { tol: self.tol, max_iter: self.max_iter }, None)?;
        Ok((inst, pen, fit))
    }
}

impl DirectionArgs {
    fn resolve(&self, inst: &RegressionInstance) -> Result<(CovarianceSpec, debias_core::model::Direction)> {
        let p = inst.p();
        let cov = match &self.cov {
            Some(path) => {
                let m = data::read_matrix(path)?;
                if m.shape() != (p, p) {
                    return Err(Error::Dimension(format!(
                        "covariance is {}x{}, expected {p}x{p}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                CovarianceSpec::new(m)?
            }
            None => CovarianceSpec::identity(p),
        };
        if self.direction == 0 || self.direction > p {
            return Err(Error::InvalidInput(format!("--direction must lie in 1..={p}")));
        }
        let a = DVector::from_fn(p, |i, _| if i + 1 == self.direction { 1.0 } else { 0.0 });
        let dir = normalize_direction(&a, &cov, &inst.x)?;
        Ok((cov, dir))
    }
}

fn f(x: f64) -> String {
    output::fmt_f64(x)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Fit { model, out } => {
            let (_, pen, fit) = model.load()?;
            println!("penalty: {}", sim::penalty_label(&pen));
            println!("objective: {}", f(fit.objective));
            println!("active_size: {}", fit.active.len());
            if let Some(g) = &fit.active_groups {
                println!("active_groups: {}", g.len());
            }
            println!("kkt_max_violation: {}", f(fit.kkt_max_violation));
            let min_slack = fit.kkt_strict.iter().map(|s| s.slack).fold(f64::INFINITY, f64::min);
            println!("min_inactive_slack: {}", f(min_slack));
            println!("iterations: {}", fit.iterations);
            if let Some(path) = out {
                data::write_vector(&path, &fit.beta_hat, "beta_hat")?;
                println!("wrote: {}", path.display());
            }
        }
        Command::Debias { model, dir, out } => {
            let (inst, pen, fit) = model.load()?;
            let (cov, d) = dir.resolve(&inst)?;
            let ctx = Debiased::new(&inst, &fit, &pen)?;
            let rep = ctx.report(&d, &cov)?;
            println!("df: {}", f(rep.df));
            println!("active_size: {}", fit.active.len());
            println!("frob_i_minus_h_sq: {}", f(rep.frob_i_minus_h_sq));
            println!("a0_dot_beta_hat: {}", f(d.a0.dot(&fit.beta_hat)));
            println!("a0_dot_beta_debias: {}", f(d.a0.dot(&rep.beta_debias)));
            println!("theta_hat: {}", f(rep.theta_hat));
            println!("w0_norm: {}", f(rep.w0.norm()));
            println!("w0_dot_residual: {}", f(rep.w0_dot_residual));
            println!("interpolating: {}", rep.interpolating);
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(path) = out {
                data::write_vector(&path, &rep.beta_debias, "beta_debias")?;
                println!("wrote: {}", path.display());
            }
        }
        Command::Ci { model, dir, alpha } => {
            let (inst, pen, fit) = model.load()?;
            let (_, d) = dir.resolve(&inst)?;
            let ctx = Debiased::new(&inst, &fit, &pen)?;
            println!("df: {}", f(ctx.df));
            for kind in CiKind::ALL {
                let ci = ctx.ci(&d, alpha, kind)?;
                match ci.reason {
                    None => println!("{kind}: [{}, {}]", f(ci.lo), f(ci.hi)),
                    Some(r) => println!("{kind}: invalid ({r})"),
                }
            }
            let def = ctx.default_ci(&d, alpha)?;
            println!("default: {} [{}, {}]", def.kind, f(def.lo), f(def.hi));
        }
        Command::Simulate { config, out, seed, reps } => {
            let mut cfg = sim::parse_config(&config)?;
            if let Some(s) = seed {
                cfg.mc.seed = s;
            }
            if let Some(r) = reps {
                cfg.mc.reps = r;
            }
            cfg.validate()?;
            let res = sim::run_experiment(&cfg)?;
            for path in sim::write_results(&res, &out)? {
                println!("wrote: {}", path.display());
            }
            for a in &res.aggregates {
                println!(
                    "{} dir {}: used {} failures {} pivot_sd(resid) {:.4} coverage(quad) {:.4}",
                    a.penalty, a.direction_id, a.used, a.failures, a.pivot_sd[0], a.coverage[2]
                );
            }
        }
        Command::SteinCheck { function, n, reps, seed } => {
            let sf = stein::registry_function(&function, n, seed)?;
            let c = stein::second_order_stein_check(sf.as_ref(), reps, seed)?;
            println!("function: {}", sf.name());
            println!("n: {n}");
            println!("reps: {reps}");
            println!("mean_xi: {} (se {})", f(c.mean_xi), f(c.mean_xi_se));
            println!("lhs: {} (se {})", f(c.lhs), f(c.lhs_se));
            println!("rhs: {} (se {})", f(c.rhs), f(c.rhs_se));
            println!("z_score: {}", f(c.z_score));
            if reps >= 1000 {
                let r = stein::approximation_report(sf.as_ref(), reps, seed)?;
                println!("var_xi: {}", f(r.mc_var_xi));
                println!("eps1_sq: {}", f(r.eps1_sq));
                println!("eps1_bar_sq: {}", f(r.eps1_bar_sq));
                let opt = |v: Option<f64>| v.map_or("NA".to_string(), f);
                println!("eps12_sq: {}", opt(r.eps12_sq));
                println!("eps12_bar_sq: {}", opt(r.eps12_bar_sq));
                println!("quadratic_discriminant: {}", opt(r.quadratic_discriminant));
                println!("ks_studentized: {}", f(r.ks_studentized));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
