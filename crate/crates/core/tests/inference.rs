use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u5mr_core::inference::{
    mcmc_reference, optimize_hyper, sample_latent, BlockPrior, HyperParameter, HyperPrior,
    LatentBlock, LatentGaussianModel, Likelihood, ModelBuilder,
};
use u5mr_core::linalg::{numerical_null_space, numerical_rank, SymSparse, RANK_TOLERANCE};
use u5mr_core::model::{pc_prior_precision, PcPriorSpec};
use u5mr_core::temporal::{curvature_constraints, rw2_precision, AxisKind, TemporalAxis};

const T: usize = 7;

fn tau_param(name: &str, u: f64, p: f64) -> HyperParameter {
    HyperParameter {
        name: name.into(),
        prior: HyperPrior::PcPrecision(pc_prior_precision(PcPriorSpec::new(u, p).unwrap())),
        lower: -15.0,
        upper: 20.0,
        initial: 1.0,
    }
}

/// Intercept + RW2 trend + iid noise over `T` time points, Gaussian data with
/// known precisions.
fn gaussian_model(u: f64, p: f64) -> (LatentGaussianModel, Vec<f64>, Vec<f64>) {
    let axis = TemporalAxis::years(AxisKind::Period, 0, T as i32 - 1).unwrap();
    let q = rw2_precision(&axis).unwrap();
    let mut b = ModelBuilder::new(Likelihood::Gaussian);
    let t_rw = b.hyper(tau_param("tau_rw2", u, p));
    let fixed = b.block(LatentBlock {
        name: "fixed".into(),
        size: 2,
        prior: BlockPrior::Fixed { precision: 1e-2 },
        constraints: vec![],
        regularizer: vec![],
    });
    let cons = curvature_constraints(&axis);
    let rw = b.block(LatentBlock {
        name: "rw2".into(),
        size: T,
        prior: BlockPrior::Scaled {
            log_pdet: q.log_pdet(),
            structure: q.matrix.clone(),
            tau: t_rw,
        },
        regularizer: cons.clone(),
        constraints: cons,
    });
    let iid = b.block(LatentBlock {
        name: "iid".into(),
        size: T,
        prior: BlockPrior::Fixed { precision: 4.0 },
        constraints: vec![],
        regularizer: vec![],
    });
    let y = vec![0.3, 0.1, -0.2, 0.4, 0.9, 0.7, 1.4];
    let prec = vec![10.0, 5.0, 20.0, 8.0, 12.0, 6.0, 15.0];
    let slope = axis.slope_values();
    for t in 0..T {
        let row = b.row(vec![
            (fixed, 1.0),
            (fixed + 1, slope[t]),
            (rw + t, 1.0),
            (iid + t, 1.0),
        ]);
        b.observe(row, y[t], prec[t]);
    }
    (b.build().unwrap(), y, prec)
}

struct Oracle {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_marginal: f64,
}

/// Closed form on the constrained subspace `x = V z` with orthonormal `V`.
fn oracle(model: &LatentGaussianModel, theta: &[f64], y: &[f64], prec: &[f64]) -> Oracle {
    let n = model.dim();
    let axis = TemporalAxis::years(AxisKind::Period, 0, T as i32 - 1).unwrap();
    let r = rw2_precision(&axis).unwrap().matrix.to_dense();
    let mut q = DMatrix::zeros(n, n);
    q[(0, 0)] = 1e-2;
    q[(1, 1)] = 1e-2;
    let tau = theta[0].exp();
    for i in 0..T {
        for j in 0..T {
            q[(2 + i, 2 + j)] = tau * r[(i, j)];
        }
        q[(2 + T + i, 2 + T + i)] = 4.0;
    }
    let rows = model.rows();
    let x = DMatrix::from_fn(T, n, |i, j| {
        rows[i].iter().find(|e| e.0 == j).map_or(0.0, |e| e.1)
    });
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(prec));
    let a = model.constraint_matrix();
    let v = DMatrix::from_fn(n, n - a.nrows(), |i, j| {
        numerical_null_space(&(a.transpose() * a), 1e-10)[j][i]
    });
    let yv = DVector::from_column_slice(y);
    let post = v.transpose() * (&q + x.transpose() * &d * &x) * &v;
    let post_inv = post.clone().try_inverse().unwrap();
    let mean = &v * &post_inv * v.transpose() * x.transpose() * &d * &yv;
    let cov = &v * post_inv * v.transpose();
    let prior_z = v.transpose() * &q * &v;
    let xv = &x * &v;
    let marg_cov = &xv * prior_z.try_inverse().unwrap() * xv.transpose() + d.try_inverse().unwrap();
    let chol = marg_cov.clone().cholesky().unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let sol = chol.solve(&yv);
    let log_marginal =
        -0.5 * (T as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + yv.dot(&sol));
    Oracle {
        mean,
        cov,
        log_marginal,
    }
}

#[test]
fn conjugate_gaussian_matches_closed_form() {
    let (model, y, prec) = gaussian_model(1.0, 0.01);
    for theta in [[0.5], [2.0], [-1.0]] {
        let approx = model.find_mode(&theta, None).unwrap();
        let o = oracle(&model, &theta, &y, &prec);
        let mode = DVector::from_column_slice(&approx.mode);
        assert!(
            (&mode - &o.mean).amax() < 1e-8,
            "mode differs by {}",
            (&mode - &o.mean).amax()
        );
        assert!((approx.covariance() - &o.cov).amax() < 1e-6);
        assert!(
            (approx.log_marginal - o.log_marginal).abs() < 1e-6,
            "{} vs {}",
            approx.log_marginal,
            o.log_marginal
        );
    }
}

#[test]
fn log_posterior_outside_domain_is_neg_infinity() {
    let (model, _, _) = gaussian_model(1.0, 0.01);
    assert_eq!(
        model.log_posterior_hyper(&[25.0], None).unwrap(),
        f64::NEG_INFINITY
    );
    assert_eq!(
        model.log_posterior_hyper(&[f64::NAN], None).unwrap(),
        f64::NEG_INFINITY
    );
}

#[test]
fn optimizer_matches_grid_and_is_a_fixed_point() {
    let (model, _, _) = gaussian_model(1.0, 0.01);
    let opt = optimize_hyper(&model, &[1.0], 100).unwrap();
    let step = 1e-3;
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut t = -5.0;
    while t <= 10.0 {
        let v = model.log_posterior_hyper(&[t], None).unwrap();
        if v > best.0 {
            best = (v, t);
        }
        t += step;
    }
    assert!(
        (opt.theta[0] - best.1).abs() <= step,
        "optimum {} vs grid {}",
        opt.theta[0],
        best.1
    );
    assert!(opt.hessian[(0, 0)] < 0.0);
    let again = optimize_hyper(&model, &opt.theta, 100).unwrap();
    assert!((again.theta[0] - opt.theta[0]).abs() < 1e-4);
    assert!(optimize_hyper(&model, &[1.0], 0).is_err());
}

#[test]
fn stronger_shrinkage_raises_optimal_precision() {
    let (loose, _, _) = gaussian_model(1.0, 0.01);
    let (tight, _, _) = gaussian_model(0.01, 0.01);
    let a = optimize_hyper(&loose, &[1.0], 100).unwrap();
    let b = optimize_hyper(&tight, &[1.0], 100).unwrap();
    assert!(b.theta[0] >= a.theta[0] - 1e-6);
}

#[test]
fn samples_respect_constraints_and_are_reproducible() {
    let (model, _, _) = gaussian_model(1.0, 0.01);
    let approx = model.find_mode(&[1.0], None).unwrap();
    let draws = sample_latent(&model, &approx, 4000, 17).unwrap();
    assert!(draws
        .draws
        .iter()
        .all(|x| model.constraint_residual(x) < 1e-8));
    let cov = approx.covariance();
    for j in 0..model.dim() {
        let mean = draws.draws.iter().map(|x| x[j]).sum::<f64>() / 4000.0;
        let se = (cov[(j, j)].max(0.0) / 4000.0).sqrt();
        assert!(
            (mean - approx.mode[j]).abs() <= 3.0 * se + 1e-12,
            "component {j}"
        );
    }
    assert_eq!(
        sample_latent(&model, &approx, 50, 3).unwrap(),
        sample_latent(&model, &approx, 50, 3).unwrap()
    );
    assert!(sample_latent(&model, &approx, 0, 3).is_err());
    // Rank of the constrained covariance.
    let rank = numerical_rank(&cov, RANK_TOLERANCE);
    assert!(rank <= model.dim() - model.n_constraints());
}

#[test]
fn factor_stays_within_symbolic_fill() {
    let (model, _, _) = gaussian_model(1.0, 0.01);
    let approx = model.find_mode(&[1.0], None).unwrap();
    assert_eq!(approx.factor.nnz(), model.symbolic().l_nnz());
}

#[test]
fn mcmc_matches_conjugate_mean() {
    let (model, y, prec) = gaussian_model(1.0, 0.01);
    let s = mcmc_reference(&model, &[1.0], 200_000, 5).unwrap();
    let o = oracle(&model, &[1.0], &y, &prec);
    for j in 0..model.dim() {
        let tol = 5.0 * o.cov[(j, j)].max(0.0).sqrt() / (200_000f64 / 50.0).sqrt() + 1e-9;
        assert!(
            (s.mean[j] - o.mean[j]).abs() < tol,
            "component {j}: {} vs {}",
            s.mean[j],
            o.mean[j]
        );
    }
    assert!(
        s.acceptance_rate > 0.1 && s.acceptance_rate < 0.6,
        "acceptance {}",
        s.acceptance_rate
    );
}

fn counts_model(zero_deaths: bool) -> LatentGaussianModel {
    let mut b = ModelBuilder::new(Likelihood::BetaBinomial { overdispersion: 0 });
    b.hyper(HyperParameter {
        name: "overdispersion".into(),
        prior: HyperPrior::Normal {
            mean: 0.0,
            precision: 0.4,
        },
        lower: -25.0,
        upper: 5.0,
        initial: -4.0,
    });
    let t_cl = b.hyper(tau_param("tau_cluster", 1.0, 0.01));
    let fixed = b.block(LatentBlock {
        name: "fixed".into(),
        size: 1,
        prior: BlockPrior::Fixed { precision: 1e-3 },
        constraints: vec![],
        regularizer: vec![],
    });
    let band = b.block(LatentBlock {
        name: "band".into(),
        size: 2,
        prior: BlockPrior::Fixed { precision: 1.0 },
        constraints: vec![],
        regularizer: vec![],
    });
    let clusters = 10;
    let cl = b.block(LatentBlock {
        name: "cluster".into(),
        size: clusters,
        prior: BlockPrior::Scaled {
            structure: SymSparse::identity(clusters),
            log_pdet: 0.0,
            tau: t_cl,
        },
        constraints: vec![vec![1.0; clusters]],
        regularizer: vec![vec![1.0 / (clusters as f64).sqrt(); clusters]],
    });
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..clusters {
        for j in 0..2 {
            let row = b.row(vec![(fixed, 1.0), (band + j, 1.0), (cl + k, 1.0)]);
            let n = 1000.0;
            let hazard = if j == 0 { 0.03 } else { 0.01 };
            let y = if zero_deaths {
                0.0
            } else {
                (0..1000).filter(|_| rng.random::<f64>() < hazard).count() as f64
            };
            b.observe(row, y, n);
        }
    }
    b.build().unwrap()
}

#[test]
fn zero_deaths_give_strongly_negative_finite_predictors() {
    let model = counts_model(true);
    let approx = model.find_mode(&[-4.0, 3.0], None).unwrap();
    assert!(
        approx.eta.iter().all(|e| e.is_finite() && *e < -4.0),
        "{:?}",
        approx.eta
    );
}

#[test]
fn single_cell_converges() {
    let mut b = ModelBuilder::new(Likelihood::Binomial);
    let f = b.block(LatentBlock {
        name: "fixed".into(),
        size: 1,
        prior: BlockPrior::Fixed { precision: 1e-3 },
        constraints: vec![],
        regularizer: vec![],
    });
    let r = b.row(vec![(f, 1.0)]);
    b.observe(r, 2.0, 40.0);
    let model = b.build().unwrap();
    let approx = model.find_mode(&[], None).unwrap();
    assert!(approx.iterations <= 50);
    assert!((approx.mode[0] - (2.0f64 / 38.0).ln()).abs() < 0.01);
}

#[test]
fn laplace_mode_close_to_mcmc_mean_for_betabinomial() {
    let model = counts_model(false);
    let theta = [-9.0, 3.0];
    let approx = model.find_mode(&theta, None).unwrap();
    let s = mcmc_reference(&model, &theta, 400_000, 21).unwrap();
    for (r, (m, e)) in approx.eta.iter().zip(&s.eta_mean).enumerate() {
        assert!((m - e).abs() < 0.05, "row {r}: mode {m} vs MCMC {e}");
    }
}

#[test]
fn log_posterior_invariant_to_observation_order() {
    let model = counts_model(false);
    let a = model.log_posterior_hyper(&[-9.0, 3.0], None).unwrap();
    let reversed = model.filter_observations(|_| true);
    let b = reversed.log_posterior_hyper(&[-9.0, 3.0], None).unwrap();
    assert!((a - b).abs() < 1e-9);
}
