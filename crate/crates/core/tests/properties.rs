mod common;

use common::*;
use diffport::diffusion::{ddim_step, forward_diffuse, NoiseSchedule};
use diffport::guidance::{
    correlation_guidance_loss, ledoit_wolf_shrink, sample_covariance, Intensity, ShrinkageTarget, TargetCorrelation,
};
use diffport::portfolio::{backtest, estimate_moments, log_utility, solve_gop, solve_mvp, MomentEstimate};
use diffport::scoring::{crps_empirical, energy_score};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || scale * normal(&mut r))
}

fn spd(n: usize, seed: u64) -> Array2<f64> {
    let f = matrix(n, n + 3, seed, 0.01);
    f.dot(&f.t()) + Array2::<f64>::eye(n) * 1e-5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shrunk_covariance_is_positive_definite(seed in any::<u64>(), m in 5usize..64) {
        let n = 12;
        let target = ShrinkageTarget::new(spd(n, seed), Intensity::Analytic).unwrap();
        let window = matrix(m, n, seed ^ 1, 0.02);
        let s = sample_covariance(window.view()).unwrap();
        let out = ledoit_wolf_shrink(s.view(), &target, window.view()).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.delta));
        prop_assert!(min_eigenvalue(&out.cov) > 0.0);
    }

    #[test]
    fn guidance_loss_is_bounded_and_scale_free(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let a = matrix(n, n, seed, 1.0).mapv(f64::abs);
        let target = TargetCorrelation { matrix: random_correlation(n, &mut r) };
        let l = correlation_guidance_loss(a.view(), &target).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        let scales: Vec<f64> = (0..n).map(|i| 0.1 + i as f64).collect();
        let scaled = Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] * scales[i]);
        let l2 = correlation_guidance_loss(scaled.view(), &target).unwrap();
        prop_assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn energy_score_is_nonnegative(seed in any::<u64>(), k in 1usize..40, n in 1usize..6) {
        let samples = matrix(k, n, seed, 1.0);
        let truth: Vec<f64> = matrix(1, n, seed ^ 3, 1.0).into_raw_vec_and_offset().0;
        prop_assert!(energy_score(samples.view(), &truth).unwrap() >= 0.0);
    }

    #[test]
    fn energy_score_reduces_to_crps_for_one_asset(seed in any::<u64>(), k in 1usize..60, y in -3.0f64..3.0) {
        let samples = matrix(k, 1, seed, 1.0);
        let es = energy_score(samples.view(), &[y]).unwrap();
        let crps = crps_empirical(samples.column(0).as_slice().unwrap(), y);
        prop_assert!((es - crps).abs() < 1e-12);
    }

    #[test]
    fn mvp_weights_are_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mu = Array1::from(matrix(1, 3, seed, 1e-3).into_raw_vec_and_offset().0);
        let sigma = spd(3, seed ^ 5);
        let a = solve_mvp(&MomentEstimate { mu: mu.clone(), sigma: sigma.clone() }).unwrap();
        let b = solve_mvp(&MomentEstimate { mu: &mu * c, sigma: &sigma * (c * c) }).unwrap();
        prop_assert_eq!(a.fallback, b.fallback);
        for (x, y) in a.weights.w.iter().zip(&b.weights.w) {
            prop_assert!((x - y).abs() < 1e-7);
        }
        prop_assert!((a.weights.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gop_is_no_worse_than_any_vertex(seed in any::<u64>(), k in 5usize..80) {
        let samples = matrix(k, 3, seed, 0.02);
        let w = solve_gop(samples.view()).unwrap();
        let u = log_utility(samples.view(), &w.w).unwrap();
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            prop_assert!(u >= log_utility(samples.view(), &e).unwrap() - 1e-12);
        }
    }

    #[test]
    fn backtest_statistics_are_consistent(seed in any::<u64>(), t in 2usize..300) {
        let realized = matrix(t, 3, seed, 0.01);
        let weights: Vec<Vec<f64>> = (0..t).map(|i| {
            let a = (i % 7) as f64 / 7.0;
            vec![a, (1.0 - a) / 2.0, (1.0 - a) / 2.0]
        }).collect();
        let rep = backtest(&weights, realized.view()).unwrap();
        if let Some(sr) = rep.sr {
            prop_assert!((sr * rep.vol - rep.ret).abs() < 1e-12);
        }
        prop_assert!((rep.mdd - brute_mdd(&rep.value_path)).abs() < 1e-12);
        prop_assert_eq!(rep.value_path.len(), t + 1);
    }

    #[test]
    fn ddim_step_to_zero_inverts_forward_noising(seed in any::<u64>(), tau in 1usize..=1000) {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0: Vec<f64> = matrix(1, 6, seed, 1.0).into_raw_vec_and_offset().0;
        let eps: Vec<f64> = matrix(1, 6, seed ^ 9, 1.0).into_raw_vec_and_offset().0;
        let xt = forward_diffuse(&x0, tau, &eps, &sched).unwrap();
        let back = ddim_step(&xt, &eps, tau, 0, 0.0, &sched, &[]).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn shrinking_the_target_itself_returns_it() {
    let train = spd(12, 77);
    let target = ShrinkageTarget::new(train.clone(), Intensity::Analytic).unwrap();
    let window = matrix(30, 12, 78, 0.02);
    let out = ledoit_wolf_shrink(train.view(), &target, window.view()).unwrap();
    assert_eq!(out.delta, 1.0);
    assert!((&out.cov - &train).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn attention_aligned_with_target_attains_minus_one() {
    let mut r = rng(4);
    let t = random_correlation(5, &mut r).mapv(f64::abs);
    let a = Array2::from_shape_fn((5, 5), |(i, j)| t[[i, j]] * (1.0 + i as f64));
    let l = correlation_guidance_loss(a.view(), &TargetCorrelation { matrix: t }).unwrap();
    assert!((l + 1.0).abs() < 1e-12);
}

#[test]
fn mvp_with_interior_solution_matches_closed_form() {
    // Diagonal-dominant covariance with positive means keeps Σ⁻¹μ positive.
    let sigma = ndarray::arr2(&[[4e-4, 1e-5, 0.0], [1e-5, 3e-4, 2e-5], [0.0, 2e-5, 5e-4]]);
    let mu = ndarray::arr1(&[1e-3, 8e-4, 1.2e-3]);
    let sol = solve_mvp(&MomentEstimate { mu: mu.clone(), sigma: sigma.clone() }).unwrap();
    let l = diffport::portfolio::cholesky(&sigma).unwrap();
    let lm = nalgebra::DMatrix::from_fn(3, 3, |i, j| l[[i, j]]);
    let raw = (&lm * lm.transpose()).lu().solve(&nalgebra::DVector::from_column_slice(mu.as_slice().unwrap())).unwrap();
    let total: f64 = raw.iter().sum();
    for i in 0..3 {
        assert!((sol.weights.w[i] - raw[i] / total).abs() < 1e-6);
    }
}

#[test]
fn moments_include_ridge() {
    let samples = matrix(50, 3, 1, 0.01);
    let m = estimate_moments(samples.view()).unwrap();
    let plain = sample_covariance(samples.view()).unwrap();
    for i in 0..3 {
        assert!((m.sigma[[i, i]] - plain[[i, i]] - diffport::portfolio::RIDGE).abs() < 1e-15);
    }
}
