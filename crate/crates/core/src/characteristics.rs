//! Return-based asset characteristics.
//!
//! Ten per-asset columns are built from daily excess returns and the three
//! factor series: four momentum horizons, change in momentum, 21-day return
//! volatility and maximum, CAPM beta (and its square) and three-factor
//! idiosyncratic volatility. Entries that cannot be computed yet are NaN and
//! are treated as undefined downstream.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};

pub const CHARACTERISTIC_NAMES: [&str; 10] = [
    "mom1m", "mom6m", "mom12m", "mom36m", "chmom", "retvol", "maxret", "beta", "betasq", "idiovol",
];

/// Trading days per month.
pub const MONTH: usize = 21;
pub const MOMENTUM_WINDOWS: [usize; 4] = [21, 126, 252, 756];
pub const CHMOM_LAG: usize = 126;
pub const VOL_WINDOW: usize = 21;
pub const REGRESSION_WINDOW: usize = 252;

/// Minimum panel length for every characteristic to be defined somewhere.
pub const WARM_UP: usize = 756;

#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicTensor {
    /// `T×N×10`, column order as in [`CHARACTERISTIC_NAMES`]; NaN = undefined.
    pub values: Array3<f64>,
    /// First date index at which all ten columns are defined for every asset.
    pub valid_from: usize,
}

impl CharacteristicTensor {
    pub fn is_defined(&self, t: usize) -> bool {
        t >= self.valid_from
            && self
                .values
                .index_axis(ndarray::Axis(0), t)
                .iter()
                .all(|v| v.is_finite())
    }
}

/// Cumulative compounded return over the trailing `k` days; NaN for `t < k−1`.
pub fn compute_momentum(returns: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1, "momentum window must be positive");
    let mut out = vec![f64::NAN; returns.len()];
    if k > returns.len() {
        return out;
    }
    // ln(1+r) prefix sums; exp of a window difference is the product.
    let mut prefix = Vec::with_capacity(returns.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for r in returns {
        acc += r.ln_1p();
        prefix.push(acc);
    }
    for t in (k - 1)..returns.len() {
        out[t] = (prefix[t + 1] - prefix[t + 1 - k]).exp_m1();
    }
    out
}

/// Rolling least-squares fit of `y` on `[1, x]`.
#[derive(Debug, Clone)]
pub struct RollingOls {
    /// `T×(p+1)`: intercept then one slope per regressor. NaN where undefined.
    pub coef: Array2<f64>,
    /// Residual standard deviation with denominator `window − p − 1`.
    pub resid_std: Vec<f64>,
}

/// Ordinary least squares with intercept over every full trailing window.
///
/// Each window is solved by Householder QR of the augmented design; the
/// residual sum of squares is read off the tail of `Qᵀy`. Windows whose
/// design is numerically rank deficient stay undefined.
pub fn rolling_ols(y: ArrayView1<'_, f64>, x: ArrayView2<'_, f64>, window: usize) -> RollingOls {
    let t_len = y.len();
    let p = x.ncols();
    assert_eq!(x.nrows(), t_len, "regressor rows must match the series");
    assert!(window > p + 1, "window must exceed regressor count + 1");
    let cols = p + 1;
    let mut coef = Array2::from_elem((t_len, cols), f64::NAN);
    let mut resid_std = vec![f64::NAN; t_len];
    if window > t_len {
        return RollingOls { coef, resid_std };
    }
    let mut a = vec![0.0; window * cols];
    let mut b = vec![0.0; window];
    for t in (window - 1)..t_len {
        let start = t + 1 - window;
        for r in 0..window {
            a[r * cols] = 1.0;
            for j in 0..p {
                a[r * cols + 1 + j] = x[[start + r, j]];
            }
            b[r] = y[start + r];
        }
        if let Some((beta, ssr)) = householder_lstsq(&mut a, &mut b, window, cols) {
            for j in 0..cols {
                coef[[t, j]] = beta[j];
            }
            resid_std[t] = (ssr / (window - cols) as f64).sqrt();
        }
    }
    RollingOls { coef, resid_std }
}

/// In-place Householder least squares on a row-major `rows×cols` matrix.
/// Returns the solution and the residual sum of squares.
fn householder_lstsq(a: &mut [f64], b: &mut [f64], rows: usize, cols: usize) -> Option<(Vec<f64>, f64)> {
    let col_norm = |a: &[f64], j: usize, from: usize| -> f64 {
        (from..rows).map(|i| a[i * cols + j].powi(2)).sum::<f64>().sqrt()
    };
    let scale: Vec<f64> = (0..cols).map(|j| col_norm(a, j, 0)).collect();
    for k in 0..cols {
        let norm = col_norm(a, k, k);
        if norm <= 1e-12 * scale[k].max(f64::MIN_POSITIVE) {
            return None;
        }
        let alpha = if a[k * cols + k] > 0.0 { -norm } else { norm };
        // v = x − alpha·e1, stored in place below the diagonal
        a[k * cols + k] -= alpha;
        let vnorm2: f64 = (k..rows).map(|i| a[i * cols + k].powi(2)).sum();
        if vnorm2 > 0.0 {
            for j in (k + 1)..cols {
                let dot: f64 = (k..rows).map(|i| a[i * cols + k] * a[i * cols + j]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..rows {
                    a[i * cols + j] -= f * a[i * cols + k];
                }
            }
            let dot: f64 = (k..rows).map(|i| a[i * cols + k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..rows {
                b[i] -= f * a[i * cols + k];
            }
        }
        a[k * cols + k] = alpha;
    }
    let rmax = (0..cols).map(|k| a[k * cols + k].abs()).fold(0.0, f64::max);
    let mut beta = vec![0.0; cols];
    for k in (0..cols).rev() {
        let r = a[k * cols + k];
        if r.abs() <= 1e-12 * rmax {
            return None;
        }
        let s: f64 = ((k + 1)..cols).map(|j| a[k * cols + j] * beta[j]).sum();
        beta[k] = (b[k] - s) / r;
    }
    let ssr = b[cols..rows].iter().map(|v| v * v).sum();
    Some((beta, ssr))
}

fn rolling_std(r: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; r.len()];
    for t in (w.saturating_sub(1))..r.len() {
        if t + 1 < w {
            continue;
        }
        let win = &r[t + 1 - w..=t];
        let mean = win.iter().sum::<f64>() / w as f64;
        let ss: f64 = win.iter().map(|v| (v - mean).powi(2)).sum();
        out[t] = (ss / (w - 1) as f64).sqrt();
    }
    out
}

fn rolling_max(r: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; r.len()];
    for t in (w.saturating_sub(1))..r.len() {
        if t + 1 < w {
            continue;
        }
        out[t] = r[t + 1 - w..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    out
}

/// Builds all ten characteristics for every asset and date of the panel.
pub fn compute_characteristics(panel: &ReturnPanel) -> Result<CharacteristicTensor> {
    let t_len = panel.len();
    if t_len < WARM_UP {
        let first = panel
            .dates
            .first()
            .map(|d| format!(" (first computable date would be {} trading days after {d})", WARM_UP - 1))
            .unwrap_or_default();
        return Err(Error::WarmUp(format!(
            "panel has {t_len} days; characteristics need at least {WARM_UP}{first}"
        )));
    }
    let n = panel.n_assets();
    let mkt = panel.factors.slice(ndarray::s![.., 0..1]);
    let ff3 = panel.factors.view();
    let mut values = Array3::from_elem((t_len, n, CHARACTERISTIC_NAMES.len()), f64::NAN);
    for i in 0..n {
        let r: Vec<f64> = panel.excess_returns.column(i).to_vec();
        let moms: Vec<Vec<f64>> = MOMENTUM_WINDOWS.iter().map(|&k| compute_momentum(&r, k)).collect();
        let vol = rolling_std(&r, VOL_WINDOW);
        let maxret = rolling_max(&r, VOL_WINDOW);
        let capm = rolling_ols(panel.excess_returns.column(i), mkt, REGRESSION_WINDOW);
        let three = rolling_ols(panel.excess_returns.column(i), ff3, REGRESSION_WINDOW);
        for t in 0..t_len {
            let mut cell = values.slice_mut(ndarray::s![t, i, ..]);
            for (c, m) in moms.iter().enumerate() {
                cell[c] = m[t];
            }
            cell[4] = if t >= CHMOM_LAG {
                moms[1][t] - moms[1][t - CHMOM_LAG]
            } else {
                f64::NAN
            };
            cell[5] = vol[t];
            cell[6] = maxret[t];
            let beta = capm.coef[[t, 1]];
            cell[7] = beta;
            cell[8] = beta * beta;
            cell[9] = three.resid_std[t];
        }
    }
    let valid_from = (0..t_len)
        .find(|&t| {
            values
                .index_axis(ndarray::Axis(0), t)
                .iter()
                .all(|v| v.is_finite())
        })
        .ok_or_else(|| Error::WarmUp("no date with every characteristic defined".into()))?;
    Ok(CharacteristicTensor { values, valid_from })
}

/// Long-format CSV `date,asset,<characteristic...>`; undefined entries are empty.
pub fn write_characteristics_csv<W: std::io::Write>(
    panel: &ReturnPanel,
    chars: &CharacteristicTensor,
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["date".to_string(), "asset".to_string()];
    header.extend(CHARACTERISTIC_NAMES.iter().map(|s| s.to_string()));
    wr.write_record(&header).map_err(e)?;
    for (t, d) in panel.dates.iter().enumerate() {
        for (i, a) in panel.assets.iter().enumerate() {
            let mut row = vec![d.to_string(), a.clone()];
            row.extend((0..CHARACTERISTIC_NAMES.len()).map(|k| {
                let v = chars.values[[t, i, k]];
                if v.is_finite() {
                    v.to_string()
                } else {
                    String::new()
                }
            }));
            wr.write_record(&row).map_err(e)?;
        }
    }
    wr.flush().map_err(|x| Error::Format(x.to_string()))?;
    Ok(())
}
