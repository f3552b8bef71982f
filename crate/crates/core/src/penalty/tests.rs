use super::*;
use crate::model::{sample_design, CovarianceSpec};
use crate::rng;
use proptest::prelude::*;

fn instance(n: usize, p: usize, seed: u64) -> RegressionInstance {
    let x = sample_design(&CovarianceSpec::identity(p), n, seed);
    let mut beta = DVector::zeros(p);
    for j in 0..p.min(3) {
        beta[j] = 1.0 + j as f64;
    }
    let noise = rng::normal_vector(&mut rng::rng(seed + 1000), n);
    let y = &x * &beta + noise;
    RegressionInstance::new(y, x, None).unwrap()
}

/// Exact Lasso/elastic-net minimizer by enumerating supports and sign
/// patterns; only feasible for tiny p.
fn enumerate_lasso(inst: &RegressionInstance, lambda: f64, mu: f64) -> DVector<f64> {
    let p = inst.p();
    let n = inst.n() as f64;
    let pen = Penalty::ElasticNet { lambda, mu };
    let obj = |b: &DVector<f64>| {
        (&inst.y - &inst.x * b).norm_squared() / (2.0 * n) + lambda * b.lp_norm(1) + 0.5 * mu * b.norm_squared()
    };
    let _ = pen;
    let mut best = (obj(&DVector::zeros(p)), DVector::zeros(p));
    for mask in 1u32..(1 << p) {
        let s: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        for signs in 0u32..(1 << s.len()) {
            let sg: Vec<f64> = (0..s.len()).map(|i| if signs & (1 << i) != 0 { 1.0 } else { -1.0 }).collect();
            let xs = inst.x.select_columns(&s);
            let mut g = xs.tr_mul(&xs);
            for i in 0..s.len() {
                g[(i, i)] += n * mu;
            }
            let rhs = xs.tr_mul(&inst.y) - DVector::from_vec(sg.clone()) * (n * lambda);
            let Some(sol) = g.lu().solve(&rhs) else { continue };
            if (0..s.len()).any(|i| sol[i] * sg[i] <= 0.0) {
                continue;
            }
            let mut b = DVector::zeros(p);
            for (i, &j) in s.iter().enumerate() {
                b[j] = sol[i];
            }
            let v = obj(&b);
            if v < best.0 {
                best = (v, b);
            }
        }
    }
    best.1
}

#[test]
fn penalty_values() {
    let b = DVector::from_vec(vec![1.0, -3.0]);
    assert_eq!(penalty_value(&Penalty::Lasso { lambda: 2.0 }, &b), 8.0);
    let groups = Groups::new(vec![vec![0, 1], vec![2]], 3).unwrap();
    let gl = Penalty::GroupLasso { groups, lambdas: vec![1.0, 2.0] };
    assert_eq!(penalty_value(&gl, &DVector::from_vec(vec![3.0, 4.0, -1.0])), 7.0);
    // g(b) = (μ/2)‖b‖²
    assert_eq!(penalty_value(&Penalty::Ridge { mu: 0.5 }, &DVector::from_vec(vec![2.0, 0.0])), 1.0);
}

#[test]
fn group_partition_validation() {
    assert!(Groups::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
    assert!(Groups::new(vec![vec![0], vec![2]], 3).is_err());
    assert!(Groups::new(vec![vec![0, 3]], 3).is_err());
    assert_eq!(Groups::from_sizes(&[2, 1]).unwrap().group(1), &[2]);
}

#[test]
fn lasso_large_lambda_gives_zero_with_strict_slack() {
    let inst = instance(30, 10, 1);
    let lmax = (inst.x.tr_mul(&inst.y) / 30.0).amax();
    let pen = Penalty::Lasso { lambda: 1.01 * lmax };
    let fit = fit(&inst, &pen, 1e-10, 1000).unwrap();
    assert!(fit.beta_hat.iter().all(|&v| v == 0.0));
    assert!(fit.active.is_empty());
    let rep = kkt_report(&fit, &inst, &pen);
    assert_eq!(rep.strict_slacks.len(), 10);
    assert!(rep.is_strict());
}

#[test]
fn scalar_lasso() {
    let inst = RegressionInstance::new(DVector::from_vec(vec![2.0]), DMatrix::from_element(1, 1, 1.0), None).unwrap();
    let f = fit(&inst, &Penalty::Lasso { lambda: 0.5 }, 1e-12, 100).unwrap();
    // grid oracle on ½(2 − b)² + 0.5|b|
    let grid_min = (0..=400_000)
        .map(|i| -1.0 + i as f64 * 1e-5)
        .min_by(|a, b| {
            let f = |v: f64| 0.5 * (2.0 - v) * (2.0 - v) + 0.5 * v.abs();
            f(*a).total_cmp(&f(*b))
        })
        .unwrap();
    assert!((grid_min - 1.5).abs() < 1e-5);
    assert!((f.beta_hat[0] - 1.5).abs() < 1e-12);
}

#[test]
fn ridge_matches_normal_equations() {
    for &(n, p) in &[(20, 8), (10, 25)] {
        let inst = instance(n, p, 3);
        let mu = 0.3;
        let f = fit(&inst, &Penalty::Ridge { mu }, 1e-10, 10).unwrap();
        let mut a = inst.x.tr_mul(&inst.x);
        for i in 0..p {
            a[(i, i)] += n as f64 * mu;
        }
        let direct = a.lu().solve(&inst.x.tr_mul(&inst.y)).unwrap();
        assert!((f.beta_hat - direct).amax() < 1e-10);
        assert!(f.kkt_max_violation < 1e-10);
    }
}

#[test]
fn lasso_matches_enumeration_oracle_small_p() {
    for seed in 0..20 {
        for p in 1..=2 {
            let inst = instance(6, p, seed);
            let lambda = 0.2 + 0.1 * (seed % 5) as f64;
            let f = fit(&inst, &Penalty::Lasso { lambda }, 1e-12, 10_000).unwrap();
            let oracle = enumerate_lasso(&inst, lambda, 0.0);
            assert!((f.beta_hat - oracle).amax() < 1e-6, "seed {seed} p {p}");
        }
    }
}

#[test]
fn elastic_net_matches_enumeration_oracle() {
    for seed in 0..10 {
        let inst = instance(8, 3, seed);
        let f = fit(&inst, &Penalty::ElasticNet { lambda: 0.3, mu: 0.2 }, 1e-12, 10_000).unwrap();
        let oracle = enumerate_lasso(&inst, 0.3, 0.2);
        assert!((f.beta_hat - oracle).amax() < 1e-8);
    }
}

#[test]
fn lasso_kkt_at_tolerance_and_tighter_rerun() {
    let inst = instance(40, 60, 5);
    let pen = Penalty::Lasso { lambda: 0.1 };
    let f10 = fit(&inst, &pen, 1e-10, 100_000).unwrap();
    assert!(f10.kkt_max_violation <= 1e-10);
    let f12 = fit(&inst, &pen, 1e-12, 100_000).unwrap();
    assert!(f12.kkt_max_violation <= 1e-12);
    assert_eq!(f10.active, f12.active);
}

#[test]
fn objective_trace_is_monotone() {
    for pen in [
        Penalty::Lasso { lambda: 0.05 },
        Penalty::ElasticNet { lambda: 0.05, mu: 0.1 },
        Penalty::group_lasso_equal(Groups::from_sizes(&[4; 10]).unwrap(), 0.1),
        LogCosh { lambda: 0.1, delta: 0.1, mu: 0.05 }.penalty(),
    ] {
        let inst = instance(30, 40, 9);
        let f = fit(&inst, &pen, 1e-10, 100_000).unwrap();
        for w in f.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{}: {} -> {}", pen.kind(), w[0], w[1]);
        }
    }
}

#[test]
fn group_lasso_with_singletons_is_lasso() {
    let inst = instance(30, 40, 11);
    let lasso = fit(&inst, &Penalty::Lasso { lambda: 0.08 }, 1e-12, 100_000).unwrap();
    let gl = fit(&inst, &Penalty::group_lasso_equal(Groups::singletons(40), 0.08), 1e-12, 100_000).unwrap();
    assert!((lasso.beta_hat - gl.beta_hat).amax() < 1e-8);
}

#[test]
fn group_lasso_converges_and_slacks_strict() {
    for seed in 0..5 {
        let inst = instance(50, 60, 100 + seed);
        let pen = Penalty::group_lasso_equal(Groups::from_sizes(&[5; 12]).unwrap(), 0.15);
        let f = fit(&inst, &pen, 1e-10, 100_000).unwrap();
        assert!(f.kkt_max_violation <= 1e-10);
        assert!(!f.kkt_strict.is_empty());
        assert!(f.kkt_strict.iter().all(|s| s.slack > 0.0));
        assert_eq!(f.active_groups.as_ref().unwrap().len() * 5, f.active.len());
    }
}

#[test]
fn not_converged_carries_iterate() {
    let inst = instance(40, 60, 5);
    match fit(&inst, &Penalty::Lasso { lambda: 0.01 }, 1e-14, 1) {
        Err(Error::NotConverged { beta, violation, iterations }) => {
            assert_eq!(beta.len(), 60);
            assert!(violation > 0.0);
            assert_eq!(iterations, 1);
        }
        other => panic!("expected NotConverged, got {other:?}"),
    }
}

#[test]
fn non_finite_data_rejected() {
    let mut inst = instance(10, 3, 1);
    inst.y[2] = f64::NAN;
    assert!(matches!(fit(&inst, &Penalty::Lasso { lambda: 0.1 }, 1e-8, 10), Err(Error::InvalidInput(_))));
}

#[derive(Debug)]
struct Broken;

impl SmoothPenaltyFn for Broken {
    fn value(&self, b: &DVector<f64>) -> f64 {
        b.norm_squared()
    }
    fn gradient(&self, b: &DVector<f64>) -> DVector<f64> {
        b.clone()
    }
    fn hessian(&self, b: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(b.len(), b.len())
    }
}

#[test]
fn inconsistent_smooth_penalty_rejected() {
    let inst = instance(10, 3, 1);
    let pen = Penalty::Smooth(SmoothPenalty { func: Arc::new(Broken), strong_convexity: 1.0 });
    assert!(matches!(fit(&inst, &pen, 1e-8, 10), Err(Error::InvalidInput(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn strongly_convex_solutions_do_not_depend_on_start(seed in 0u64..10_000) {
        let inst = instance(20, 30, seed);
        let mut r = rng::rng(seed ^ 0xabc);
        for pen in [
            Penalty::ElasticNet { lambda: 0.1, mu: 0.2 },
            LogCosh { lambda: 0.1, delta: 0.2, mu: 0.1 }.penalty(),
        ] {
            let a = fit_with(&inst, &pen, FitOptions { tol: 1e-12, max_iter: 100_000 }, None).unwrap();
            let start = rng::normal_vector(&mut r, 30) * 3.0;
            let b = fit_with(&inst, &pen, FitOptions { tol: 1e-12, max_iter: 100_000 }, Some(&start)).unwrap();
            prop_assert!((a.beta_hat - b.beta_hat).amax() < 1e-8);
        }
    }
}
