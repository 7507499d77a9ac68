//! Long-only portfolio construction from forecast ensembles and a daily
//! rebalanced backtest.
//!
//! The maximum-Sharpe (tangency) portfolio is found through the
//! nonnegative quadratic program `min ½yᵀΣy − μᵀy, y ≥ 0`: its KKT system is
//! a positive rescaling of the one for `min yᵀΣy s.t. μᵀy = 1, y ≥ 0`, so
//! `y/Σy` is the long-only tangency portfolio whenever some `μ_i > 0`. With
//! `μ = 1` the same program yields the long-only minimum-variance
//! portfolio, which serves as the fallback when no asset has a positive
//! predicted excess return.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};

/// Ridge added to ensemble covariances.
pub const RIDGE: f64 = 1e-8;
pub const TRADING_DAYS: f64 = 252.0;
const MAX_ITER: usize = 100_000;
const KKT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
}

/// Sample mean and `K−1` covariance of `K×N` samples, plus `RIDGE·I`.
pub fn estimate_moments(samples: ArrayView2<'_, f64>) -> Result<MomentEstimate> {
    let k = samples.nrows();
    if k < 2 {
        return Err(Error::Estimation(format!("need at least 2 samples, got {k}")));
    }
    let mu = samples.mean_axis(Axis(0)).expect("nonempty");
    let c = &samples - &mu;
    let mut sigma = c.t().dot(&c) / (k - 1) as f64;
    let n = sigma.nrows();
    for i in 0..n {
        sigma[[i, i]] += RIDGE;
        for j in 0..i {
            let v = 0.5 * (sigma[[i, j]] + sigma[[j, i]]);
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    Ok(MomentEstimate { mu, sigma })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioWeights {
    pub w: Vec<f64>,
}

impl PortfolioWeights {
    fn from_unnormalized(y: &[f64]) -> Result<Self> {
        let s: f64 = y.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Numeric("portfolio weights do not normalize".into()));
        }
        Ok(Self {
            w: y.iter().map(|v| (v / s).max(0.0)).collect(),
        })
    }
}

/// Solution of the mean-variance step with the fallback flag.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MvpSolution {
    pub weights: PortfolioWeights,
    /// True when no asset had positive predicted excess return and the
    /// minimum-variance portfolio was used.
    pub fallback: bool,
}

/// Lower Cholesky factor of a small symmetric positive definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numeric("covariance is not positive definite".into()));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Cholesky solve of `a x = b` for a small SPD matrix.
fn cholesky_solve(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let l = cholesky(a)?;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Ok(x)
}

fn kkt_residual(q: &Array2<f64>, c: &[f64], y: &[f64]) -> f64 {
    let qy = q.dot(&Array1::from(y.to_vec()));
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let w = c[i] - qy[i];
            if yi > 0.0 {
                w.abs()
            } else {
                w.max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Active-set solver for `min ½yᵀQy − cᵀy, y ≥ 0` with `Q` positive definite.
pub fn nnqp(q: &Array2<f64>, c: &[f64]) -> Result<Vec<f64>> {
    let n = c.len();
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut y = vec![0.0; n];
    let mut passive = vec![false; n];
    let mut iterations = 0;
    loop {
        let qy = q.dot(&Array1::from(y.clone()));
        let w: Vec<f64> = (0..n).map(|i| c[i] - qy[i]).collect();
        let cand = (0..n)
            .filter(|&i| !passive[i] && w[i] > KKT_TOL * scale)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            iterations += 1;
            if iterations > MAX_ITER {
                return Err(Error::Convergence {
                    iterations,
                    residual: kkt_residual(q, c, &y),
                });
            }
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| q[[idx[a], idx[b]]]);
            let rhs: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
            let z = cholesky_solve(&sub, &rhs)?;
            if z.iter().all(|&v| v > 0.0) {
                for (&i, &v) in idx.iter().zip(&z) {
                    y[i] = v;
                }
                break;
            }
            // Step toward z until the first passive coordinate hits zero.
            let mut alpha = 1.0f64;
            for (&i, &v) in idx.iter().zip(&z) {
                if v <= 0.0 {
                    alpha = alpha.min(y[i] / (y[i] - v));
                }
            }
            for (&i, &v) in idx.iter().zip(&z) {
                y[i] += alpha * (v - y[i]);
                if y[i] <= 1e-15 * scale.max(1.0) {
                    y[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual = kkt_residual(q, c, &y);
    if residual > KKT_TOL * scale.max(1.0) * 10.0 {
        return Err(Error::Convergence { iterations, residual });
    }
    Ok(y)
}

/// Long-only maximum-Sharpe weights (minimum variance when all `μ ≤ 0`).
pub fn solve_mvp(m: &MomentEstimate) -> Result<MvpSolution> {
    let n = m.mu.len();
    if m.sigma.dim() != (n, n) {
        return Err(Error::shape(n, m.sigma.nrows()));
    }
    if n == 0 {
        return Err(Error::Data("no assets".into()));
    }
    let s = (0..n).map(|i| m.sigma[[i, i]]).sum::<f64>() / n as f64;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Numeric("covariance diagonal is not positive".into()));
    }
    let q = &m.sigma / s;
    let mu_max = m.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fallback = mu_max <= 0.0;
    let c: Vec<f64> = if fallback {
        vec![1.0; n]
    } else {
        m.mu.iter().map(|v| v / mu_max).collect()
    };
    let y = nnqp(&q, &c)?;
    Ok(MvpSolution {
        weights: PortfolioWeights::from_unnormalized(&y)?,
        fallback,
    })
}

/// Sample-average log utility; `None` when some scenario wipes out wealth.
pub fn log_utility(samples: ArrayView2<'_, f64>, w: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for row in samples.rows() {
        let g = 1.0 + row.iter().zip(w).map(|(r, x)| r * x).sum::<f64>();
        if g <= 0.0 {
            return None;
        }
        total += g.ln();
    }
    Some(total / samples.nrows() as f64)
}

fn utility_grad(samples: ArrayView2<'_, f64>, w: &[f64]) -> Vec<f64> {
    let k = samples.nrows() as f64;
    let mut g = vec![0.0; w.len()];
    for row in samples.rows() {
        let inv = 1.0 / (1.0 + row.iter().zip(w).map(|(r, x)| r * x).sum::<f64>());
        for (gi, r) in g.iter_mut().zip(row.iter()) {
            *gi += r * inv / k;
        }
    }
    g
}

/// Zeroes small weights whose marginal utility is below the portfolio
/// average (the KKT sign for an inactive asset) when that does not lower
/// utility; multiplicative updates only approach a face asymptotically.
fn polish(samples: ArrayView2<'_, f64>, w: Vec<f64>, u: f64) -> Vec<f64> {
    let g = utility_grad(samples, &w);
    let gbar: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
    let drop: Vec<bool> = w.iter().zip(&g).map(|(a, b)| *a > 0.0 && *a < 1e-3 && *b < gbar).collect();
    let kept: f64 = w.iter().zip(&drop).filter(|(_, d)| !**d).map(|(a, _)| a).sum();
    if !drop.contains(&true) || kept <= 0.0 {
        return w;
    }
    let cand: Vec<f64> = w.iter().zip(&drop).map(|(a, d)| if *d { 0.0 } else { a / kept }).collect();
    match log_utility(samples, &cand) {
        Some(uc) if uc >= u => cand,
        _ => w,
    }
}

/// Long-only growth-optimal weights by exponentiated-gradient ascent.
pub fn solve_gop(samples: ArrayView2<'_, f64>) -> Result<PortfolioWeights> {
    let (k, n) = samples.dim();
    if k == 0 || n == 0 {
        return Err(Error::Data("empty ensemble".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite ensemble entry".into()));
    }
    let mut w = vec![1.0 / n as f64; n];
    let mut u = match log_utility(samples, &w) {
        Some(u) => u,
        None => {
            let best = (0..n)
                .filter_map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    log_utility(samples, &e).map(|u| (i, u))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .ok_or_else(|| Error::Feasibility("no long-only portfolio keeps wealth positive in every scenario".into()))?
                .0;
            let mut s = 0.5;
            loop {
                let cand: Vec<f64> = (0..n)
                    .map(|i| (1.0 - s) / n as f64 + if i == best { s } else { 0.0 })
                    .collect();
                if let Some(u) = log_utility(samples, &cand) {
                    w = cand;
                    break u;
                }
                s = if s > 1.0 - 1e-12 { 1.0 } else { 0.5 * (1.0 + s) };
            }
        }
    };
    if n == 1 {
        return Ok(PortfolioWeights { w });
    }
    let mut g = utility_grad(samples, &w);
    let range = |g: &[f64]| {
        let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let r0 = range(&g);
    if r0 == 0.0 {
        return Ok(PortfolioWeights { w });
    }
    let mut eta = 1.0 / r0;
    let residual = |w: &[f64], g: &[f64]| {
        let gbar: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
        w.iter()
            .zip(g)
            .map(|(a, b)| (a * (b - gbar)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for _ in 0..MAX_ITER {
        if residual(&w, &g) < 1e-9 {
            return Ok(PortfolioWeights { w: polish(samples, w, u) });
        }
        let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a * (eta * (b - gmax)).exp()).collect();
        let z: f64 = raw.iter().sum();
        let cand: Vec<f64> = raw.iter().map(|v| v / z).collect();
        match log_utility(samples, &cand) {
            Some(uc) if uc >= u => {
                let gain = uc - u;
                w = cand;
                u = uc;
                g = utility_grad(samples, &w);
                eta *= 2.0;
                if gain < 1e-12 && residual(&w, &g) < 1e-6 {
                    return Ok(PortfolioWeights { w: polish(samples, w, u) });
                }
            }
            _ => {
                eta *= 0.5;
                if eta < 1e-300 {
                    return Ok(PortfolioWeights { w: polish(samples, w, u) });
                }
            }
        }
    }
    Err(Error::Convergence {
        iterations: MAX_ITER,
        residual: residual(&w, &g),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub daily_returns: Vec<f64>,
    /// `V_0 = 1` followed by one value per day.
    pub value_path: Vec<f64>,
    pub ret: f64,
    pub vol: f64,
    /// `None` when volatility is zero.
    pub sr: Option<f64>,
    /// Maximum drawdown magnitude (displayed negative in reports).
    pub mdd: f64,
    /// `None` after a bankruptcy event.
    pub ce: Option<f64>,
    pub bankrupt: bool,
}

/// Statistics of a daily portfolio return series.
pub fn backtest_series(daily: &[f64]) -> Result<BacktestReport> {
    let t = daily.len();
    if t == 0 {
        return Err(Error::Data("empty return series".into()));
    }
    let mean = daily.iter().sum::<f64>() / t as f64;
    let constant = daily.iter().all(|r| *r == daily[0]);
    let sd = if t > 1 && !constant {
        (daily.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt()
    } else {
        0.0
    };
    let ret = mean * TRADING_DAYS;
    let vol = sd * TRADING_DAYS.sqrt();
    let sr = (vol > 0.0).then(|| ret / vol);
    let mut value_path = Vec::with_capacity(t + 1);
    value_path.push(1.0);
    let (mut v, mut peak, mut mdd) = (1.0f64, 1.0f64, 0.0f64);
    let mut bankrupt = false;
    let mut log_sum = 0.0;
    for &r in daily {
        if 1.0 + r <= 0.0 {
            bankrupt = true;
        } else {
            log_sum += (1.0 + r).ln();
        }
        v *= 1.0 + r;
        value_path.push(v);
        peak = peak.max(v);
        if peak > 0.0 {
            mdd = mdd.max((peak - v) / peak);
        }
    }
    let ce = (!bankrupt).then(|| (log_sum / t as f64 * TRADING_DAYS).exp() - 1.0);
    Ok(BacktestReport {
        daily_returns: daily.to_vec(),
        value_path,
        ret,
        vol,
        sr,
        mdd,
        ce,
        bankrupt,
    })
}

/// Applies per-date weights to realized returns (`weights[t]` meets row `t`).
pub fn backtest(weights: &[Vec<f64>], realized: ArrayView2<'_, f64>) -> Result<BacktestReport> {
    if weights.len() != realized.nrows() {
        return Err(Error::shape(realized.nrows(), weights.len()));
    }
    let daily: Vec<f64> = weights
        .iter()
        .zip(realized.rows())
        .map(|(w, r)| {
            if w.len() != r.len() {
                return Err(Error::shape(r.len(), w.len()));
            }
            Ok(w.iter().zip(r.iter()).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<_>>()?;
    backtest_series(&daily)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

/// Report CSV with one row per strategy: SR, Ret, Vol, MDD (negative), CE.
pub fn write_report_csv<W: std::io::Write>(rows: &[(&str, &BacktestReport)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["strategy", "sr", "ret", "vol", "mdd", "ce", "bankrupt"]).map_err(e)?;
    for (name, r) in rows {
        wr.write_record([
            name.to_string(),
            fmt_opt(r.sr),
            format!("{:.6}", r.ret),
            format!("{:.6}", r.vol),
            format!("{:.6}", -r.mdd),
            fmt_opt(r.ce),
            r.bankrupt.to_string(),
        ])
        .map_err(e)?;
    }
    wr.flush().map_err(|x| Error::Format(x.to_string()))?;
    Ok(())
}
