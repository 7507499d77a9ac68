mod common;

use common::*;
use diffport::nn::{ConditioningBundle, DenoiserParams};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn full_network_gradients_match_finite_differences() {
    let cfg = tiny_config();
    for seed in 0..5 {
        let err = denoiser_gradient_error(&cfg, seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn deeper_network_gradients_match_finite_differences() {
    let mut cfg = tiny_config();
    cfg.cross_depth = 2;
    cfg.self_depth = 2;
    cfg.window_pos = false;
    let err = denoiser_gradient_error(&cfg, 11);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn block_gradients_match_finite_differences() {
    for seed in 0..3 {
        for cross in [true, false] {
            let err = block_gradient_error(seed, cross);
            assert!(err < 1e-4, "seed {seed} cross {cross}: {err:e}");
        }
    }
}

#[test]
fn guidance_term_gradient_matches_finite_differences() {
    let err = total_loss_gradient_error(&tiny_config(), 3, 0.7);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn asset_latent_ignores_other_assets_context() {
    let cfg = tiny_config();
    let p = DenoiserParams::init(&cfg, 4).unwrap();
    let mut r = rng(40);
    let ctx = random_ctx(&cfg, &mut r);
    let x = [0.3, -1.2, 0.8];
    let base = p.forward_encoded(&p.encode_context(&ctx).unwrap(), &x, 17).unwrap();
    for j in 0..cfg.n_assets {
        let mut moved = ctx.clone();
        for t in 0..cfg.window {
            moved.hist[[t, j]] += 2.0;
            for k in 0..cfg.z_dim {
                moved.asset_covs[[t, j, k]] -= 1.5;
            }
        }
        let mut xm = x;
        xm[j] += 0.9;
        let pass = p.forward_encoded(&p.encode_context(&moved).unwrap(), &xm, 17).unwrap();
        let (h0, h1) = (base.tape.asset_latents(), pass.tape.asset_latents());
        for i in (0..cfg.n_assets).filter(|i| *i != j) {
            assert_eq!(h0.row(i), h1.row(i), "asset {i} changed when asset {j} moved");
        }
        assert_ne!(h0.row(j), h1.row(j));
    }
}

#[test]
fn noise_estimate_ignores_sys_values_when_sys_weights_are_zero() {
    let cfg = tiny_config();
    let mut p = DenoiserParams::init(&cfg, 8).unwrap();
    p.sys_embed.w.fill(0.0);
    let mut r = rng(80);
    let ctx = random_ctx(&cfg, &mut r);
    let mut other = ctx.clone();
    other.sys = Array2::from_shape_simple_fn(ctx.sys.raw_dim(), || 10.0 * normal(&mut r));
    let x = [0.1, 0.2, -0.4];
    let (e0, a0) = p.forward(&x, 9, &ctx).unwrap();
    let (e1, a1) = p.forward(&x, 9, &other).unwrap();
    assert_eq!(e0, e1);
    assert_eq!(a0, a1);
}

fn permuted(ctx: &ConditioningBundle, perm: &[usize]) -> ConditioningBundle {
    let (m, n, z) = ctx.asset_covs.dim();
    ConditioningBundle {
        hist: Array2::from_shape_fn((m, n), |(t, i)| ctx.hist[[t, perm[i]]]),
        asset_covs: Array3::from_shape_fn((m, n, z), |(t, i, k)| ctx.asset_covs[[t, perm[i], k]]),
        sys: ctx.sys.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), tau in 1usize..200) {
        let cfg = tiny_config();
        let p = DenoiserParams::init(&cfg, seed).unwrap();
        let mut r = rng(seed.wrapping_add(1));
        let ctx = random_ctx(&cfg, &mut r);
        let x: Vec<f64> = (0..cfg.n_assets).map(|_| 3.0 * normal(&mut r)).collect();
        let pass = p.forward_encoded(&p.encode_context(&ctx).unwrap(), &x, tau).unwrap();
        let all = pass.tape.self_attention_probs().iter().chain(pass.tape.cross_attention_probs());
        for probs in all {
            for row in probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
        for row in pass.attention.rows() {
            prop_assert!(row.sum() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn permuting_assets_permutes_outputs(seed in any::<u64>(), shift in 1usize..3) {
        let cfg = tiny_config();
        let p = DenoiserParams::init(&cfg, seed).unwrap();
        let mut r = rng(seed ^ 7);
        let ctx = random_ctx(&cfg, &mut r);
        let n = cfg.n_assets;
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let tau = r.gen_range(1..100);
        let (e, a) = p.forward(&x, tau, &ctx).unwrap();
        let (ep, ap) = p.forward(&xp, tau, &permuted(&ctx, &perm)).unwrap();
        for i in 0..n {
            prop_assert!((ep[i] - e[perm[i]]).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((ap[[i, j]] - a[[perm[i], perm[j]]]).abs() < 1e-12);
            }
        }
    }
}
