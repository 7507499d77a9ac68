//! Proper scoring rules for ensemble forecasts and the correlation diagnostic.

use std::f64::consts::PI;

use chrono::Datelike;
use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::ensemble::ForecastEnsemble;
use crate::error::{Error, Result};

/// Empirical CRPS `(1/K)Σ|x_k−r| − (1/2K²)ΣΣ|x_i−x_j|`.
///
/// The pairwise sum is evaluated in `O(K log K)` from the sorted samples.
pub fn crps_empirical(samples: &[f64], truth: f64) -> f64 {
    let k = samples.len() as f64;
    let first = samples.iter().map(|x| (x - truth).abs()).sum::<f64>() / k;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − K + 1) x_(i) with 0-based ranks.
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - k + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    first - pair / (2.0 * k * k)
}

/// Closed-form CRPS of `N(mu, sigma²)` at `r`.
pub fn gaussian_crps(mu: f64, sigma: f64, r: f64) -> f64 {
    let z = (r - mu) / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
    sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / PI.sqrt())
}

fn dist(a: ndarray::ArrayView1<'_, f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Energy score `(1/K)Σ‖x_k−r‖ − (1/2K²)ΣΣ‖x_i−x_j‖` for `K×N` samples.
pub fn energy_score(samples: ArrayView2<'_, f64>, truth: &[f64]) -> Result<f64> {
    let (k, n) = samples.dim();
    if n != truth.len() {
        return Err(Error::shape(n, truth.len()));
    }
    if k == 0 {
        return Err(Error::Data("empty ensemble".into()));
    }
    let first: f64 = samples.rows().into_iter().map(|x| dist(x, truth)).sum::<f64>() / k as f64;
    let mut pair = 0.0;
    for i in 0..k {
        let xi = samples.row(i);
        for j in i + 1..k {
            pair += xi
                .iter()
                .zip(samples.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    // ordered pairs count each unordered pair twice
    Ok(first - 2.0 * pair / (2.0 * (k * k) as f64))
}

/// Time-average each asset's CRPS series, then the mean and the sample
/// standard deviation (`n−1`) across assets. A single asset has std 0.
pub fn aggregate_crps(per_asset: &[Vec<f64>]) -> Result<(f64, f64)> {
    let Some(first) = per_asset.first() else {
        return Err(Error::Data("no CRPS series".into()));
    };
    let len = first.len();
    if len == 0 || per_asset.iter().any(|s| s.len() != len) {
        return Err(Error::shape(len, per_asset.iter().map(|s| s.len()).max().unwrap_or(0)));
    }
    let avgs: Vec<f64> = per_asset.iter().map(|s| s.iter().sum::<f64>() / len as f64).collect();
    let n = avgs.len() as f64;
    let mean = avgs.iter().sum::<f64>() / n;
    let std = if avgs.len() < 2 {
        0.0
    } else {
        (avgs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}

/// Pearson correlation matrix of the columns of `x`.
pub fn correlation_matrix(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let t = x.nrows();
    if t < 2 {
        return Err(Error::Degenerate(format!("need at least 2 rows, got {t}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let c = &x - &mean;
    let cov = c.t().dot(&c);
    let n = x.ncols();
    let sd: Vec<f64> = (0..n).map(|i| cov[[i, i]].sqrt()).collect();
    for (i, s) in sd.iter().enumerate() {
        if !(*s > 0.0 && s.is_finite()) {
            return Err(Error::Degenerate(format!("column {i} is constant")));
        }
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            1.0
        } else {
            cov[[i, j]] / (sd[i] * sd[j])
        }
    }))
}

/// `‖C_real − C_synth‖_F` with `C_synth` from the given synthetic paths.
pub fn corr_score_paths(real: ArrayView2<'_, f64>, synth: ArrayView2<'_, f64>) -> Result<f64> {
    if real.dim() != synth.dim() {
        return Err(Error::shape(format!("{:?}", real.dim()), format!("{:?}", synth.dim())));
    }
    let a = correlation_matrix(real)?;
    let b = correlation_matrix(synth)?;
    Ok((&a - &b).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Stacked per-date ensemble means (`T×N`).
pub fn mean_paths(ensembles: &[ForecastEnsemble]) -> Array2<f64> {
    let n = ensembles.first().map_or(0, |e| e.n());
    let mut out = Array2::zeros((ensembles.len(), n));
    for (i, e) in ensembles.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from(e.mean()));
    }
    out
}

/// CorrScore of ensembles against realized rows on the same dates.
pub fn corr_score(real: ArrayView2<'_, f64>, ensembles: &[ForecastEnsemble]) -> Result<f64> {
    if real.nrows() != ensembles.len() {
        return Err(Error::shape(real.nrows(), ensembles.len()));
    }
    corr_score_paths(real, mean_paths(ensembles).view())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub n_dates: usize,
    pub crps_mean: f64,
    pub crps_std: f64,
    pub es: f64,
    /// `None` when a correlation column is degenerate.
    pub corr_score: Option<f64>,
}

/// Scores ensembles against realized excess returns (`real` row `i` is the
/// outcome for `ensembles[i]`).
pub fn evaluate(real: ArrayView2<'_, f64>, ensembles: &[ForecastEnsemble]) -> Result<ScoreReport> {
    let t = ensembles.len();
    if t == 0 || real.nrows() != t {
        return Err(Error::shape(t, real.nrows()));
    }
    let n = real.ncols();
    let mut per_asset = vec![Vec::with_capacity(t); n];
    let mut es = 0.0;
    for (e, r) in ensembles.iter().zip(real.rows()) {
        if e.n() != n {
            return Err(Error::shape(n, e.n()));
        }
        let truth = r.to_vec();
        for (j, series) in per_asset.iter_mut().enumerate() {
            series.push(crps_empirical(&e.samples.column(j).to_vec(), truth[j]));
        }
        es += energy_score(e.samples.view(), &truth)?;
    }
    let (crps_mean, crps_std) = aggregate_crps(&per_asset)?;
    let corr = match corr_score(real, ensembles) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ScoreReport {
        n_dates: t,
        crps_mean,
        crps_std,
        es: es / t as f64,
        corr_score: corr,
    })
}

/// Scores over trailing 3-calendar-year windows, one row per year present
/// in the ensemble dates.
pub fn rolling_yearly(real: ArrayView2<'_, f64>, ensembles: &[ForecastEnsemble]) -> Result<Vec<(i32, ScoreReport)>> {
    let mut years: Vec<i32> = ensembles.iter().map(|e| e.date.year()).collect();
    years.dedup();
    let mut out = Vec::with_capacity(years.len());
    for y in years {
        let idx: Vec<usize> = ensembles
            .iter()
            .enumerate()
            .filter(|(_, e)| (y - 2..=y).contains(&e.date.year()))
            .map(|(i, _)| i)
            .collect();
        let ens: Vec<ForecastEnsemble> = idx.iter().map(|&i| ensembles[i].clone()).collect();
        let rows = real.select(Axis(0), &idx);
        out.push((y, evaluate(rows.view(), &ens)?));
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Score CSV: the overall row (`window = all`) followed by yearly rows.
pub fn write_score_csv<W: std::io::Write>(
    model: &str,
    overall: &ScoreReport,
    yearly: &[(i32, ScoreReport)],
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["model", "window", "n_dates", "crps_mean", "crps_std", "es", "corr_score"])
        .map_err(e)?;
    let mut row = |window: String, r: &ScoreReport| {
        wr.write_record([
            model.to_string(),
            window,
            r.n_dates.to_string(),
            format!("{:e}", r.crps_mean),
            format!("{:e}", r.crps_std),
            format!("{:e}", r.es),
            opt(r.corr_score),
        ])
    };
    row("all".into(), overall).map_err(e)?;
    for (y, r) in yearly {
        row(format!("{}-{}", y - 2, y), r).map_err(e)?;
    }
    wr.flush().map_err(|x| Error::Format(x.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn brute_crps(s: &[f64], r: f64) -> f64 {
        let k = s.len() as f64;
        let a: f64 = s.iter().map(|x| (x - r).abs()).sum::<f64>() / k;
        let b: f64 = s.iter().flat_map(|x| s.iter().map(move |y| (x - y).abs())).sum();
        a - b / (2.0 * k * k)
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_empirical(&[2.0, 2.0, 2.0], 2.0), 0.0);
        assert_eq!(crps_empirical(&[1.0, 3.0], 2.0), 0.5);
        let s = [0.3, -1.2, 2.5, 0.0, 0.7];
        assert_abs_diff_eq!(crps_empirical(&s, 0.4), brute_crps(&s, 0.4), epsilon = 1e-14);
    }

    #[test]
    fn gaussian_crps_at_zero() {
        // (√2 − 1)/√π
        assert_abs_diff_eq!(gaussian_crps(0.0, 1.0, 0.0), (2f64.sqrt() - 1.0) / PI.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn energy_score_examples() {
        let s = array![[0.0, 0.0], [2.0, 0.0]];
        assert_abs_diff_eq!(energy_score(s.view(), &[1.0, 0.0]).unwrap(), 0.5, epsilon = 1e-15);
        let one = array![[0.3, 0.4]];
        assert_eq!(energy_score(one.view(), &[0.3, 0.4]).unwrap(), 0.0);
        let col = array![[1.0], [3.0], [-0.5]];
        assert_abs_diff_eq!(
            energy_score(col.view(), &[2.0]).unwrap(),
            crps_empirical(&[1.0, 3.0, -0.5], 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = aggregate_crps(&[vec![0.1, 0.1], vec![0.3, 0.3]]).unwrap();
        assert_abs_diff_eq!(m, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s, 0.02f64.sqrt(), epsilon = 1e-15);
        let (_, s) = aggregate_crps(&[vec![0.1, 0.2], vec![0.1, 0.2]]).unwrap();
        assert_eq!(s, 0.0);
        assert!(aggregate_crps(&[vec![0.1], vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn corr_score_examples() {
        let real = array![[1.0, 2.0], [2.0, 1.0], [3.0, 5.0], [0.0, 0.5]];
        assert_abs_diff_eq!(corr_score_paths(real.view(), real.view()).unwrap(), 0.0, epsilon = 1e-15);
        let scaled = real.mapv(|v| 3.0 * v + 1.0);
        assert_abs_diff_eq!(corr_score_paths(real.view(), scaled.view()).unwrap(), 0.0, epsilon = 1e-12);
        // uncorrelated real vs perfectly correlated synthetic
        let real = array![[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let synth = array![[1.0, 1.0], [-1.0, -1.0], [1.0, 1.0], [-1.0, -1.0]];
        assert_abs_diff_eq!(corr_score_paths(real.view(), synth.view()).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        let flat = array![[1.0, 1.0], [1.0, 2.0], [1.0, 3.0]];
        assert!(matches!(correlation_matrix(flat.view()), Err(Error::Degenerate(_))));
    }
}
