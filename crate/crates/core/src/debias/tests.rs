use super::*;
use crate::model::{decompose_design, normalize_direction, sample_design, Truth};
use crate::penalty::LogCosh;
use crate::rng;

fn simulated(n: usize, p: usize, seed: u64) -> RegressionInstance {
    let mut beta = DVector::zeros(p);
    for j in 0..p.min(4) {
        beta[j] = [2.0, -1.5, 1.0, 0.5][j];
    }
    let truth = Truth { beta, sigma: 1.0, cov: CovarianceSpec::identity(p) };
    RegressionInstance::simulate(truth, n, &mut rng::rng(seed))
}

fn penalties(p: usize) -> Vec<Penalty> {
    let sizes: Vec<usize> = (0..p / 2).map(|_| 2).collect();
    let groups = Groups::from_sizes(&sizes).unwrap();
    vec![
        Penalty::Lasso { lambda: 0.15 },
        Penalty::ElasticNet { lambda: 0.15, mu: 0.3 },
        Penalty::group_lasso_equal(groups, 0.2),
        Penalty::Ridge { mu: 0.4 },
        LogCosh { lambda: 0.2, delta: 0.5, mu: 0.1 }.penalty(),
    ]
}

fn tight(inst: &RegressionInstance, pen: &Penalty) -> FitResult {
    penalty::fit(inst, pen, 1e-12, 1_000_000).unwrap()
}

fn e1_direction(inst: &RegressionInstance) -> Direction {
    let mut a = DVector::zeros(inst.p());
    a[0] = 1.0;
    normalize_direction(&a, &CovarianceSpec::identity(inst.p()), &inst.x).unwrap()
}

#[test]
fn closed_form_matches_finite_differences() {
    for &(n, p) in &[(20, 8), (30, 40)] {
        let inst = simulated(n, p, 3);
        for pen in penalties(p) {
            let fit = tight(&inst, &pen);
            let h = hat_h(&fit, &pen, &inst).unwrap();
            let fd = finite_diff_h(&inst, &pen, None).unwrap();
            let err = (&h - &fd).amax();
            assert!(err < 1e-5, "{} ({n},{p}): max error {err:e}", pen.kind());
        }
    }
}

#[test]
fn lasso_hat_is_projection_with_df_support_size() {
    let inst = simulated(30, 40, 4);
    let pen = Penalty::Lasso { lambda: 0.1 };
    let fit = tight(&inst, &pen);
    let h = hat_h(&fit, &pen, &inst).unwrap();
    assert!((&h * &h - &h).amax() < 1e-10);
    assert!((&h - h.transpose()).amax() < 1e-12);
    assert!((h.trace() - fit.active.len() as f64).abs() < 1e-9);
    assert_eq!(df(&fit, &pen, &inst).unwrap(), fit.active.len() as f64);
    let op = HatOperator::new(&fit, &pen, &inst).unwrap();
    let dense = (DMatrix::identity(30, 30) - &h).norm_squared();
    assert!((op.frob_i_minus_h_sq() - dense).abs() < 1e-9);
}

#[test]
fn hat_eigenvalues_in_unit_interval() {
    let inst = simulated(20, 8, 5);
    for pen in penalties(8) {
        let fit = tight(&inst, &pen);
        let h = hat_h(&fit, &pen, &inst).unwrap();
        let ev = h.symmetric_eigenvalues();
        assert!(ev.min() > -1e-10 && ev.max() < 1.0 + 1e-10, "{}: {ev}", pen.kind());
    }
}

#[test]
fn traces_match_dense_matrix() {
    for &(n, p) in &[(20, 8), (30, 40)] {
        let inst = simulated(n, p, 6);
        for pen in penalties(p) {
            let fit = tight(&inst, &pen);
            let op = HatOperator::new(&fit, &pen, &inst).unwrap();
            let h = op.matrix().unwrap();
            assert!((op.df() - h.trace()).abs() < 1e-8, "{}", pen.kind());
            let dense = (DMatrix::identity(n, n) - &h).norm_squared();
            assert!((op.frob_i_minus_h_sq() - dense).abs() < 1e-8, "{}", pen.kind());
        }
    }
}

#[test]
fn ridge_df_from_singular_values() {
    // Oracle: eigen-decomposition of the Gram, independent of the SVD path.
    let inst = simulated(15, 25, 7);
    let mu = 0.5;
    let pen = Penalty::Ridge { mu };
    let fit = tight(&inst, &pen);
    let gram = &inst.x * inst.x.transpose();
    let shift = 15.0 * mu;
    let expected: f64 = gram.symmetric_eigenvalues().iter().map(|&e| e / (e + shift)).sum();
    assert!((df(&fit, &pen, &inst).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn empty_support_gives_zero_hat() {
    let inst = simulated(10, 5, 8);
    let pen = Penalty::Lasso { lambda: 1e3 };
    let fit = tight(&inst, &pen);
    assert!(fit.active.is_empty());
    let d = Debiased::new(&inst, &fit, &pen).unwrap();
    assert_eq!(d.df, 0.0);
    assert_eq!(d.frob_i_minus_h_sq, 10.0);
    assert_eq!(d.w0(&e1_direction(&inst)).0, DVector::zeros(10));
}

/// Central-difference Jacobian of z ↦ X(z)β̂ − y(z), where
/// X(z) = XQ0 + z a0ᵀ and y(z) = XQ0β + zθ + ε keep (XQ0, ε) fixed.
fn fd_jacobian(inst: &RegressionInstance, pen: &Penalty, dir: &Direction, theta: f64) -> DMatrix<f64> {
    let n = inst.n();
    let (z0, xq0) = decompose_design(&inst.x, dir);
    let opts = FitOptions { tol: 1e-12, max_iter: 1_000_000 };
    let base = penalty::fit_with(inst, pen, opts, None).unwrap();
    let f = |z: &DVector<f64>| {
        let x = &xq0 + z * dir.a0.transpose();
        let y = &inst.y + (z - &z0) * theta;
        let moved = RegressionInstance::new(y.clone(), x.clone(), None).unwrap();
        let fit = penalty::fit_with(&moved, pen, opts, Some(&base.beta_hat)).unwrap();
        (x * &fit.beta_hat - y, fit)
    };
    let h = 1e-6;
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut zp = z0.clone();
        zp[i] += h;
        let mut zm = z0.clone();
        zm[i] -= h;
        let ((fp, fitp), (fm, fitm)) = (f(&zp), f(&zm));
        assert!(same_support(&fitp, &base) && same_support(&fitm, &base));
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

#[test]
fn gradient_of_fitted_residual_matches_finite_differences() {
    for &(n, p) in &[(20, 8), (30, 40)] {
        let inst = simulated(n, p, 9);
        let dir = e1_direction(&inst);
        let theta = dir.a0.dot(&inst.truth.as_ref().unwrap().beta);
        for pen in penalties(p) {
            let fit = tight(&inst, &pen);
            let g = grad_f_z0(&fit, &pen, &dir, &inst, None).unwrap();
            let jac = g.jacobian.clone().unwrap();
            let fd = fd_jacobian(&inst, &pen, &dir, theta);
            let scale = 1.0 + fd.amax();
            let err = (&jac - &fd).amax() / scale;
            assert!(err < 1e-5, "{} ({n},{p}): {err:e}", pen.kind());
            assert!((g.frob_sq - jac.norm_squared()).abs() < 1e-8 * (1.0 + g.frob_sq));
            assert!((g.trace_sq - (&jac * &jac).trace()).abs() < 1e-8 * (1.0 + g.frob_sq));
            assert!((g.divergence - jac.trace()).abs() < 1e-8 * (1.0 + g.divergence.abs()));
        }
    }
}

#[test]
fn w0_term_isolated_at_theta_equal_fitted() {
    // With θ = ⟨a0, β̂⟩ the Jacobian reduces to w0 rᵀ.
    let inst = simulated(20, 8, 10);
    let dir = e1_direction(&inst);
    let pen = Penalty::ElasticNet { lambda: 0.1, mu: 0.2 };
    let fit = tight(&inst, &pen);
    let theta = dir.a0.dot(&fit.beta_hat);
    let fd = fd_jacobian(&inst, &pen, &dir, theta);
    let w = w0(&fit, &pen, &dir, &inst).unwrap();
    let expected = &w * fit.residual.transpose();
    assert!((fd - expected).amax() < 1e-6);
}

#[test]
fn xi_identity_links_pivot_and_stein_statistic() {
    let inst = simulated(30, 40, 11);
    let dir = e1_direction(&inst);
    let theta = dir.a0.dot(&inst.truth.as_ref().unwrap().beta);
    for pen in penalties(40) {
        let fit = tight(&inst, &pen);
        let d = Debiased::new(&inst, &fit, &pen).unwrap();
        let g = d.grad_f_z0(&dir, None).unwrap();
        let f = -&fit.residual;
        let xi = dir.z0.dot(&f) - g.divergence;
        let rhs = d.n_minus_df().unwrap() * (d.theta_hat(&dir).unwrap() - theta);
        assert!((-xi - rhs).abs() < 1e-9 * (1.0 + xi.abs()), "{}", pen.kind());
    }
}

#[test]
fn v_star_quadratic_matches_gradient() {
    let inst = simulated(20, 8, 12);
    let dir = e1_direction(&inst);
    let pen = Penalty::group_lasso_equal(Groups::from_sizes(&[2, 2, 2, 2]).unwrap(), 0.2);
    let fit = tight(&inst, &pen);
    let d = Debiased::new(&inst, &fit, &pen).unwrap();
    let q = d.v_star(&dir);
    for t in [-1.0, 0.3, 2.5] {
        let g = d.grad_f_z0(&dir, Some(t)).unwrap();
        let direct = d.residual_norm_sq() + g.trace_sq;
        assert!((q.eval(t) - direct).abs() < 1e-9 * direct);
    }
}

#[test]
fn debias_vector_linear_in_direction() {
    let inst = simulated(30, 10, 13);
    let cov = CovarianceSpec::identity(10);
    let pen = Penalty::Lasso { lambda: 0.1 };
    let fit = tight(&inst, &pen);
    let d = Debiased::new(&inst, &fit, &pen).unwrap();
    let b = d.debias_vector(&cov).unwrap();
    let dir = e1_direction(&inst);
    // ⟨a0, β̂^debias⟩ = ⟨a0, β̂⟩ + ⟨z0, r⟩ / (n − d̂f)
    let expected = dir.a0.dot(&fit.beta_hat) + dir.z0.dot(&fit.residual) / d.n_minus_df().unwrap();
    assert!((dir.a0.dot(&b) - expected).abs() < 1e-12);
}

#[test]
fn w0_respects_norm_bound() {
    let cov = CovarianceSpec::identity(8);
    for seed in 0..5 {
        let inst = simulated(20, 8, 100 + seed);
        let dir = e1_direction(&inst);
        for pen in penalties(8) {
            let fit = tight(&inst, &pen);
            let w = w0(&fit, &pen, &dir, &inst).unwrap();
            let bound = w0_norm_bound(&pen, &inst, &cov).unwrap();
            assert!(w.norm_squared() <= bound * (1.0 + 1e-10), "{}", pen.kind());
        }
    }
}

#[test]
fn interpolating_fit_sets_w0_to_zero() {
    let x = sample_design(&CovarianceSpec::identity(6), 4, 14);
    let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let inst = RegressionInstance::new(y, x, None).unwrap();
    let pen = Penalty::Lasso { lambda: 1e-3 };
    let mut fit = tight(&inst, &pen);
    fit.residual = DVector::zeros(4);
    let d = Debiased::new(&inst, &fit, &pen).unwrap();
    let (w, flag) = d.w0(&e1_direction(&inst));
    assert!(flag);
    assert_eq!(w, DVector::zeros(4));
}

#[test]
fn saturated_support_is_degenerate() {
    let x = sample_design(&CovarianceSpec::identity(6), 4, 15);
    let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let inst = RegressionInstance::new(y, x, None).unwrap();
    let pen = Penalty::Lasso { lambda: 1e-4 };
    let fit = tight(&inst, &pen);
    assert_eq!(fit.active.len(), 4);
    let d = Debiased::new(&inst, &fit, &pen).unwrap();
    assert!(matches!(d.debias_vector(&CovarianceSpec::identity(6)), Err(Error::DegenerateCorrection { .. })));
}

#[test]
fn gradient_needs_theta_without_truth() {
    let sim = simulated(10, 4, 16);
    let inst = RegressionInstance::new(sim.y.clone(), sim.x.clone(), None).unwrap();
    let pen = Penalty::Ridge { mu: 1.0 };
    let fit = tight(&inst, &pen);
    let dir = e1_direction(&inst);
    assert!(matches!(grad_f_z0(&fit, &pen, &dir, &inst, None), Err(Error::ThetaRequired)));
    assert!(grad_f_z0(&fit, &pen, &dir, &inst, Some(0.0)).is_ok());
}

#[test]
fn group_m_warns_on_tiny_blocks() {
    let inst = simulated(20, 4, 17);
    let groups = Groups::from_sizes(&[2, 2]).unwrap();
    let pen = Penalty::group_lasso_equal(groups.clone(), 0.05);
    let mut fit = tight(&inst, &pen);
    assert_eq!(fit.active_groups.as_deref(), Some(&[0, 1][..]));
    let (m, w) = group_lasso_m(&fit, &groups, &[0.05, 0.05]).unwrap();
    assert!(w.is_empty());
    assert!((&m - m.transpose()).amax() < 1e-14);
    let thr = zero_threshold(&fit.beta_hat);
    fit.beta_hat[2] = 3.0 * thr;
    fit.beta_hat[3] = 0.0;
    let (_, w) = group_lasso_m(&fit, &groups, &[0.05, 0.05]).unwrap();
    assert_eq!(w.len(), 1);
}
