mod common;

use common::{gaussian, jacobi_eigenvalues, jacobi_singular_values, random_loss, rng};
use gdcert::experiments::{gen_problem, DataScheme, InitScheme, ProblemSpec};
use gdcert::init::{assert_alpha1_positive, compute_init_summary};
use gdcert::loss::LossModel;
use gdcert::matrix::{imbalance, operator_spectral_bounds};

#[test]
fn eigenvalue_statistics_match_a_dense_oracle() {
    let mut r = rng(20);
    for (n, m, h) in [(2, 3, 7), (3, 3, 6), (4, 2, 11), (1, 1, 3)] {
        let loss = random_loss(&mut r, n, m);
        let (w1, w2) = (gaussian(&mut r, n, h), gaussian(&mut r, m, h));
        let s = compute_init_summary(&w1, &w2, &loss).unwrap();
        let eig = jacobi_eigenvalues(&imbalance(&w1, &w2).unwrap());
        let neg: Vec<f64> = eig.iter().rev().map(|v| -v).collect();
        let tol = 1e-10 * (1.0 + eig[0].abs());
        assert!((s.lambda_plus - eig[0].max(0.0)).abs() < tol);
        assert!((s.lambda_minus - neg[0].max(0.0)).abs() < tol);
        let under = eig[n - 1].max(0.0) + neg[m - 1].max(0.0);
        assert!((s.delta_under - under).abs() < tol);
        assert!((s.delta_plus - (eig[0].max(0.0) - eig[n - 1].max(0.0))).abs() < tol);
        assert!((s.delta_minus - (neg[0].max(0.0) - neg[m - 1].max(0.0))).abs() < tol);
        let frob = eig.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((s.d0_frobenius - frob).abs() < tol);
    }
}

#[test]
fn margin_terms_follow_their_definitions() {
    let mut r = rng(21);
    for _ in 0..10 {
        let loss = random_loss(&mut r, 3, 2);
        let (w1, w2) = (gaussian(&mut r, 3, 6), gaussian(&mut r, 2, 6));
        let s = compute_init_summary(&w1, &w2, &loss).unwrap();
        let sv = jacobi_singular_values(loss.minimizer());
        let dist = (&w1 * w2.transpose() - loss.minimizer()).norm() * (loss.smoothness() / loss.mu()).sqrt();
        assert!((s.beta1 - (sv[sv.len() - 1] - dist).max(0.0)).abs() < 1e-10 * (1.0 + dist));
        assert!((s.beta2 - (sv[0] + dist)).abs() < 1e-10 * (1.0 + dist));
        let b1 = 4.0 * s.beta1 * s.beta1;
        let alpha1 = 0.5
            * (-s.delta_plus - s.delta_minus
                + ((s.delta_plus + s.delta_under).powi(2) + b1).sqrt()
                + ((s.delta_minus + s.delta_under).powi(2) + b1).sqrt());
        assert!((s.alpha1 - alpha1).abs() < 1e-12 * (1.0 + alpha1.abs()));
        assert!(s.alpha1 <= s.alpha2);
    }
}

#[test]
fn initial_operator_lies_inside_its_bounds_for_square_products() {
    let mut r = rng(22);
    for trial in 0..200 {
        let n = 1 + trial % 4;
        let h = n + 1 + trial % 5;
        let loss = random_loss(&mut r, n, n);
        let scale = [0.1, 1.0, 3.0][trial % 3];
        let (w1, w2) = (gaussian(&mut r, n, h) * scale, gaussian(&mut r, n, h) * scale);
        let s = compute_init_summary(&w1, &w2, &loss).unwrap();
        let op = operator_spectral_bounds(&w1, &w2).unwrap();
        let tol = 1e-9 * (1.0 + s.alpha2);
        assert!(s.alpha1 <= op.sigma2_min + tol, "trial {trial}: {} > {}", s.alpha1, op.sigma2_min);
        assert!(op.sigma2_max <= s.alpha2 + tol, "trial {trial}");
        let sv = jacobi_singular_values(&(&w1 * w2.transpose()));
        assert!(s.beta1 <= sv[sv.len() - 1] + tol && sv[0] <= s.beta2 + tol);
    }
}

#[test]
fn alpha1_is_positive_once_width_reaches_n_plus_m() {
    for seed in 0..50 {
        let spec = ProblemSpec { n: 3, m: 2, s: 4, h: 5, seed, ..ProblemSpec::default() };
        let p = gen_problem(&spec).unwrap();
        let s = compute_init_summary(&p.w1_0, &p.w2_0, &p.loss).unwrap();
        assert!(s.delta_under > 0.0, "seed {seed}");
        assert!(assert_alpha1_positive(&s).is_ok());
    }
}

#[test]
fn scaled_init_keeps_alpha1_above_the_width_floor() {
    let p = 0.375;
    for h in [256, 512, 1024] {
        let mut below = 0;
        for seed in 0..50 {
            let spec = ProblemSpec {
                n: 10,
                m: 10,
                s: 10,
                h,
                init: InitScheme::ScaledNormal { p },
                data: DataScheme::OrthogonalTheta { noise: 0.1 },
                seed,
            };
            let prob = gen_problem(&spec).unwrap();
            let s = compute_init_summary(&prob.w1_0, &prob.w2_0, &prob.loss).unwrap();
            if s.alpha1 < (h as f64).powf(1.0 - 2.0 * p) {
                below += 1;
            }
        }
        assert_eq!(below, 0, "h = {h}");
    }
}
