//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use chrono::{Days, NaiveDate};
use diffport::data::ReturnPanel;
use diffport::guidance::TargetCorrelation;
use diffport::nn::attention::AttentionBlock;
use diffport::nn::{ConditioningBundle, DenoiserConfig, DenoiserParams};
use diffport::pipeline::TrainSample;
use diffport::train::{compute_total_loss, NoiseDraw};
use diffport::diffusion::NoiseSchedule;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The configuration used by the gradient suite.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        n_assets: 3,
        n_sys: 2,
        window: 5,
        hidden: 8,
        heads: 2,
        mlp_hidden: 16,
        step_embed_dim: 4,
        z_dim: 2,
        ..Default::default()
    }
}

pub fn random_ctx(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> ConditioningBundle {
    ConditioningBundle {
        hist: Array2::from_shape_simple_fn((cfg.window, cfg.n_assets), || normal(rng)),
        asset_covs: Array3::from_shape_simple_fn((cfg.window, cfg.n_assets, cfg.z_dim), || normal(rng)),
        sys: Array2::from_shape_simple_fn((cfg.window, cfg.n_sys), || normal(rng)),
    }
}

/// Random correlation matrix with unit diagonal.
pub fn random_correlation(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let f = Array2::from_shape_simple_fn((n, n + 2), || normal(rng));
    let c = f.dot(&f.t());
    Array2::from_shape_fn((n, n), |(i, j)| c[[i, j]] / (c[[i, i]] * c[[j, j]]).sqrt())
}

/// Relative error with the denominator floored at 1e-6.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const FD_STEP: f64 = 1e-4;

/// Largest relative error between `analytic` and a fourth-order five-point
/// difference of `loss` over every entry of `flat`.
pub fn fd_max_error(flat: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(flat.len(), analytic.len());
    let mut x = flat.to_vec();
    let mut worst = 0.0f64;
    let h = FD_STEP;
    for i in 0..x.len() {
        let orig = x[i];
        let mut at = |d: f64| {
            x[i] = orig + d;
            loss(&x)
        };
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Full-network check: loss `c_epsᵀε̂ + ⟨C_A, A⟩` with random weights.
pub fn denoiser_gradient_error(cfg: &DenoiserConfig, seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = DenoiserParams::init(cfg, seed).unwrap();
    let ctx = random_ctx(cfg, &mut r);
    let n = cfg.n_assets;
    let x: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let tau = r.gen_range(1..=50);
    let c_eps: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
    let c_att = Array2::from_shape_simple_fn((n, n), || normal(&mut r));
    let enc = p.encode_context(&ctx).unwrap();
    let pass = p.forward_encoded(&enc, &x, tau).unwrap();
    let mut g = p.zeros_like();
    p.backward(&enc, &pass, &c_eps, Some(&c_att), &mut g);
    let mut q = p.clone();
    fd_max_error(&p.to_flat(), &g.to_flat(), |f| {
        q.load_flat(f).unwrap();
        let (e, a) = q.forward(&x, tau, &ctx).unwrap();
        e.iter().zip(&c_eps).map(|(a, b)| a * b).sum::<f64>() + (&a * &c_att).sum()
    })
}

/// Total training loss (MSE + λ·L_corr) against finite differences.
pub fn total_loss_gradient_error(cfg: &DenoiserConfig, seed: u64, lambda: f64) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let p = DenoiserParams::init(cfg, seed).unwrap();
    let sched = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
    let n = cfg.n_assets;
    let batch: Vec<TrainSample> = (0..3)
        .map(|t| TrainSample {
            t_index: t,
            x0: (0..n).map(|_| normal(&mut r)).collect(),
            ctx: random_ctx(cfg, &mut r),
            target: TargetCorrelation {
                matrix: random_correlation(n, &mut r),
            },
        })
        .collect();
    let draws: Vec<NoiseDraw> = (0..3)
        .map(|_| NoiseDraw {
            tau: r.gen_range(1..=50),
            eps: (0..n).map(|_| normal(&mut r)).collect(),
        })
        .collect();
    let out = compute_total_loss(&p, &batch, &draws, &sched, lambda, true).unwrap();
    let mut q = p.clone();
    fd_max_error(&p.to_flat(), &out.grad.to_flat(), |f| {
        q.load_flat(f).unwrap();
        compute_total_loss(&q, &batch, &draws, &sched, lambda, true).unwrap().total
    })
}

fn block_slices(b: &AttentionBlock) -> Vec<&[f64]> {
    vec![
        b.w_q.as_slice().unwrap(),
        b.w_k.as_slice().unwrap(),
        b.w_v.as_slice().unwrap(),
        b.norm.gain.as_slice().unwrap(),
        b.norm.bias.as_slice().unwrap(),
        b.mlp.fc1.w.as_slice().unwrap(),
        b.mlp.fc1.b.as_slice().unwrap(),
        b.mlp.fc2.w.as_slice().unwrap(),
        b.mlp.fc2.b.as_slice().unwrap(),
    ]
}

fn block_flat(b: &AttentionBlock) -> Vec<f64> {
    block_slices(b).concat()
}

fn block_load(b: &mut AttentionBlock, flat: &[f64]) {
    let mut off = 0;
    for s in [
        b.w_q.as_slice_mut().unwrap(),
        b.w_k.as_slice_mut().unwrap(),
        b.w_v.as_slice_mut().unwrap(),
        b.norm.gain.as_slice_mut().unwrap(),
        b.norm.bias.as_slice_mut().unwrap(),
        b.mlp.fc1.w.as_slice_mut().unwrap(),
        b.mlp.fc1.b.as_slice_mut().unwrap(),
        b.mlp.fc2.w.as_slice_mut().unwrap(),
        b.mlp.fc2.b.as_slice_mut().unwrap(),
    ] {
        s.copy_from_slice(&flat[off..off + s.len()]);
        off += s.len();
    }
}

/// One attention block in isolation: parameters and both inputs, with a
/// loss on the output and on the probabilities. `cross` uses separate
/// grouped key/value rows, otherwise self-attention over the query rows.
pub fn block_gradient_error(seed: u64, cross: bool) -> f64 {
    let mut r = rng(seed);
    let (d, heads, hidden) = (8, 2, 16);
    let blk = AttentionBlock::init(d, hidden, &mut r);
    let (rows, groups, kv_rows) = if cross { (3, 3, 15) } else { (5, 1, 5) };
    let xq = Array2::from_shape_simple_fn((rows, d), || normal(&mut r));
    let xkv = if cross {
        Array2::from_shape_simple_fn((kv_rows, d), || normal(&mut r))
    } else {
        xq.clone()
    };
    let c_out = Array2::from_shape_simple_fn((rows, d), || normal(&mut r));
    let (_, tape) = blk.forward(xq.view(), xkv.view(), heads, groups);
    let c_probs: Vec<Array2<f64>> = tape
        .probs
        .iter()
        .map(|p| Array2::from_shape_simple_fn(p.raw_dim(), || normal(&mut r)))
        .collect();
    let loss = |b: &AttentionBlock, q: &Array2<f64>, kv: &Array2<f64>| {
        let (o, t) = b.forward(q.view(), kv.view(), heads, groups);
        (&o * &c_out).sum() + t.probs.iter().zip(&c_probs).map(|(p, c)| (p * c).sum()).sum::<f64>()
    };
    let mut g = AttentionBlock::zeros(d, hidden);
    let (dxq, dxkv) = blk.backward(xq.view(), xkv.view(), &tape, c_out.view(), Some(&c_probs), &mut g);
    let mut worst = 0.0f64;

    let mut b2 = blk.clone();
    worst = worst.max(fd_max_error(&block_flat(&blk), &block_flat(&g), |f| {
        block_load(&mut b2, f);
        loss(&b2, &xq, &xkv)
    }));
    if cross {
        worst = worst.max(fd_max_error(xq.as_slice().unwrap(), dxq.as_slice().unwrap(), |f| {
            let q = Array2::from_shape_vec(xq.raw_dim(), f.to_vec()).unwrap();
            loss(&blk, &q, &xkv)
        }));
        worst = worst.max(fd_max_error(xkv.as_slice().unwrap(), dxkv.as_slice().unwrap(), |f| {
            let kv = Array2::from_shape_vec(xkv.raw_dim(), f.to_vec()).unwrap();
            loss(&blk, &xq, &kv)
        }));
    } else {
        // Self-attention: the same rows feed queries, keys and values.
        let total = &dxq + &dxkv;
        worst = worst.max(fd_max_error(xq.as_slice().unwrap(), total.as_slice().unwrap(), |f| {
            let x = Array2::from_shape_vec(xq.raw_dim(), f.to_vec()).unwrap();
            loss(&blk, &x, &x)
        }));
    }
    worst
}

/// Random panel with `n` assets over `days` weekdays; returns, risk-free
/// rate and factors are independent Gaussian draws.
pub fn random_panel(days: usize, n: usize, seed: u64) -> ReturnPanel {
    let mut r = rng(seed);
    let mut dates = Vec::with_capacity(days);
    let mut d = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    while dates.len() < days {
        use chrono::Datelike;
        if d.weekday().num_days_from_monday() < 5 {
            dates.push(d);
        }
        d = d + Days::new(1);
    }
    let factors = Array2::from_shape_simple_fn((days, 3), || 0.01 * normal(&mut r));
    let mut raw = Array2::zeros((days, n));
    for t in 0..days {
        for i in 0..n {
            raw[[t, i]] = 3e-4 + (0.5 + 0.4 * i as f64) * factors[[t, 0]] + 0.3 * factors[[t, 1]] + 0.012 * normal(&mut r);
        }
    }
    let rf = Array1::from_shape_fn(days, |_| 1e-4 + 2e-5 * normal(&mut r));
    let assets = (0..n).map(|i| format!("S{i}")).collect();
    ReturnPanel::new(dates, assets, raw, rf, factors).unwrap()
}

/// OLS with intercept via nalgebra's QR; returns `(coefficients, residual
/// std with denominator rows − p − 1)`.
pub fn ols(y: &[f64], x: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let m = y.len();
    let p = x[0].len();
    let design = nalgebra::DMatrix::from_fn(m, p + 1, |r, c| if c == 0 { 1.0 } else { x[r][c - 1] });
    let yy = nalgebra::DVector::from_column_slice(y);
    let qr = design.clone().qr();
    let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * &yy)).unwrap();
    let resid = &yy - &design * &coef;
    let ss: f64 = resid.iter().map(|e| e * e).sum();
    (coef.iter().copied().collect(), (ss / (m - p - 1) as f64).sqrt())
}

/// Brute-force per-date recomputation of the ten characteristics.
pub fn naive_characteristics(panel: &ReturnPanel) -> Array3<f64> {
    let (t_len, n) = panel.excess_returns.dim();
    let mut out = Array3::from_elem((t_len, n, 10), f64::NAN);
    let mom = |r: &[f64], t: usize, k: usize| -> f64 {
        if t + 1 < k {
            return f64::NAN;
        }
        r[t + 1 - k..=t].iter().map(|v| 1.0 + v).product::<f64>() - 1.0
    };
    for i in 0..n {
        let r: Vec<f64> = panel.excess_returns.column(i).to_vec();
        for t in 0..t_len {
            for (c, k) in [21, 126, 252, 756].into_iter().enumerate() {
                out[[t, i, c]] = mom(&r, t, k);
            }
            if t >= 126 {
                out[[t, i, 4]] = mom(&r, t, 126) - mom(&r, t - 126, 126);
            }
            if t >= 20 {
                let w = &r[t - 20..=t];
                let mean = w.iter().sum::<f64>() / 21.0;
                out[[t, i, 5]] = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
                out[[t, i, 6]] = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            if t >= 251 {
                let rows = t - 251..=t;
                let y: Vec<f64> = rows.clone().map(|s| r[s]).collect();
                let capm: Vec<Vec<f64>> = rows.clone().map(|s| vec![panel.factors[[s, 0]]]).collect();
                let (b, _) = ols(&y, &capm);
                out[[t, i, 7]] = b[1];
                out[[t, i, 8]] = b[1] * b[1];
                let ff: Vec<Vec<f64>> = rows.map(|s| panel.factors.row(s).to_vec()).collect();
                out[[t, i, 9]] = ols(&y, &ff).1;
            }
        }
    }
    out
}

/// Largest drawdown magnitude by scanning every peak/trough pair.
pub fn brute_mdd(path: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..path.len() {
        for b in a..path.len() {
            if path[a] > 0.0 {
                worst = worst.max((path[a] - path[b]) / path[a]);
            }
        }
    }
    worst
}

/// Points of the 2-simplex `{w ≥ 0, Σw = 1}` on a grid of spacing `1/steps`.
pub fn simplex_grid(steps: usize) -> impl Iterator<Item = [f64; 3]> {
    let h = 1.0 / steps as f64;
    (0..=steps).flat_map(move |a| (0..=steps - a).map(move |b| [a as f64 * h, b as f64 * h, (steps - a - b) as f64 * h]))
}

pub fn sharpe(w: &[f64], mu: &Array1<f64>, sigma: &Array2<f64>) -> f64 {
    let w = Array1::from(w.to_vec());
    w.dot(mu) / w.dot(&sigma.dot(&w)).sqrt()
}

/// Best Sharpe ratio over the simplex grid with spacing 1e-3.
pub fn grid_best_sharpe(mu: &Array1<f64>, sigma: &Array2<f64>) -> f64 {
    simplex_grid(1000)
        .map(|w| sharpe(&w, mu, sigma))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn mean_log_utility(samples: &Array2<f64>, w: &[f64]) -> f64 {
    let mut s = 0.0;
    for row in samples.rows() {
        let g: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
        if 1.0 + g <= 0.0 {
            return f64::NEG_INFINITY;
        }
        s += (1.0 + g).ln();
    }
    s / samples.nrows() as f64
}

/// Best mean log utility: a 1e-3 simplex grid, then a 1e-5 grid within
/// ±2e-3 of the coarse optimum.
pub fn grid_best_log_utility(samples: &Array2<f64>) -> f64 {
    let mut best = (f64::NEG_INFINITY, [0.0; 3]);
    for w in simplex_grid(1000) {
        let u = mean_log_utility(samples, &w);
        if u > best.0 {
            best = (u, w);
        }
    }
    let c = best.1;
    for da in -200..=200 {
        for db in -200..=200 {
            let a = c[0] + da as f64 * 1e-5;
            let b = c[1] + db as f64 * 1e-5;
            let w = [a, b, 1.0 - a - b];
            if w.iter().all(|v| *v >= 0.0) {
                let u = mean_log_utility(samples, &w);
                if u > best.0 {
                    best = (u, w);
                }
            }
        }
    }
    best.0
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    m.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}
