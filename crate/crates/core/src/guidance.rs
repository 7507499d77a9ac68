//! Correlation guidance: shrunk target correlations and the row-cosine
//! regularizer on the stage-2 attention map.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to covariance diagonals before taking square roots.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Unbiased sample covariance (denominator `M−1`) of an `M×N` window.
pub fn sample_covariance(window: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let m = window.nrows();
    if m < 2 {
        return Err(Error::Estimation(format!("need at least 2 rows, got {m}")));
    }
    let mean = window.mean_axis(Axis(0)).expect("nonempty");
    let centered = &window - &mean;
    let mut cov = centered.t().dot(&centered) / (m - 1) as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intensity {
    Analytic,
    Fixed(f64),
}

/// Shrinkage toward a covariance estimated once on the whole training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageTarget {
    pub train_cov: Array2<f64>,
    pub intensity: Intensity,
}

impl ShrinkageTarget {
    pub fn new(train_cov: Array2<f64>, intensity: Intensity) -> Result<Self> {
        let n = train_cov.nrows();
        if train_cov.ncols() != n {
            return Err(Error::shape(format!("{n}x{n}"), format!("{:?}", train_cov.dim())));
        }
        if train_cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite training covariance".into()));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (train_cov[[i, j]], train_cov[[j, i]]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Estimation("training covariance is not symmetric".into()));
                }
            }
        }
        if let Intensity::Fixed(d) = intensity {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::config("guidance.delta", format!("{d} outside [0, 1]")));
            }
        }
        Ok(Self { train_cov, intensity })
    }

    pub fn dim(&self) -> usize {
        self.train_cov.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk {
    pub cov: Array2<f64>,
    pub delta: f64,
}

/// Sum over entries of the estimated asymptotic variance of the sample
/// covariance: `Σ_ij (1/M) Σ_t ((x_ti − x̄_i)(x_tj − x̄_j) − s_ij)²` with the
/// `1/M` moment `s_ij`.
fn pi_hat(window: ArrayView2<'_, f64>) -> f64 {
    let m = window.nrows() as f64;
    let mean = window.mean_axis(Axis(0)).expect("nonempty");
    let c = &window - &mean;
    let s = c.t().dot(&c) / m;
    let sq = c.mapv(|v| v * v);
    // Σ_t (c_ti c_tj)² = (sqᵀ sq)_ij, so the per-entry variance needs no T×N×N tensor.
    let fourth = sq.t().dot(&sq) / m;
    (&fourth - &s.mapv(|v| v * v)).sum()
}

/// `δ·Σ^train + (1−δ)·S`. The analytic intensity is `clip(π̂ / (M·γ̂), 0, 1)`
/// with `γ̂ = ‖Σ^train − S‖²_F`; `γ̂ = 0` gives `δ = 1`.
pub fn ledoit_wolf_shrink(
    sample: ArrayView2<'_, f64>,
    target: &ShrinkageTarget,
    window: ArrayView2<'_, f64>,
) -> Result<Shrunk> {
    let n = target.dim();
    if sample.dim() != (n, n) || window.ncols() != n {
        return Err(Error::shape(
            format!("{n}x{n} sample and M×{n} window"),
            format!("{:?} sample and {:?} window", sample.dim(), window.dim()),
        ));
    }
    let delta = match target.intensity {
        Intensity::Fixed(d) => d,
        Intensity::Analytic => {
            let gamma: f64 = (&target.train_cov - &sample).iter().map(|v| v * v).sum();
            if gamma == 0.0 {
                1.0
            } else {
                let m = window.nrows() as f64;
                (pi_hat(window) / (m * gamma)).clamp(0.0, 1.0)
            }
        }
    };
    if !delta.is_finite() {
        return Err(Error::Numeric("non-finite shrinkage intensity".into()));
    }
    let mut cov = &target.train_cov * delta + &sample * (1.0 - delta);
    symmetrize(&mut cov);
    Ok(Shrunk { cov, delta })
}

/// Symmetric matrix with unit diagonal and entries in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCorrelation {
    pub matrix: Array2<f64>,
}

pub fn covariance_to_correlation(cov: ArrayView2<'_, f64>) -> Result<TargetCorrelation> {
    let n = cov.nrows();
    let mut inv_sd = Vec::with_capacity(n);
    for i in 0..n {
        let d = cov[[i, i]];
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::Degenerate(format!("variance {d} for asset {i}")));
        }
        inv_sd.push(1.0 / d.max(VARIANCE_FLOOR).sqrt());
    }
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = if i == j {
                1.0
            } else {
                (cov[[i, j]] * inv_sd[i] * inv_sd[j]).clamp(-1.0, 1.0)
            };
        }
    }
    symmetrize(&mut m);
    Ok(TargetCorrelation { matrix: m })
}

/// Shrunk target correlation for one window.
pub fn target_correlation(target: &ShrinkageTarget, window: ArrayView2<'_, f64>) -> Result<TargetCorrelation> {
    let s = sample_covariance(window)?;
    let shrunk = ledoit_wolf_shrink(s.view(), target, window)?;
    covariance_to_correlation(shrunk.cov.view())
}

/// Negative mean row-cosine between `A` and the target rows. A zero target
/// row contributes 0.
pub fn correlation_guidance_loss(a: ArrayView2<'_, f64>, target: &TargetCorrelation) -> Result<f64> {
    correlation_guidance_loss_grad(a, target).map(|(l, _)| l)
}

/// Loss and `dL/dA`.
pub fn correlation_guidance_loss_grad(
    a: ArrayView2<'_, f64>,
    target: &TargetCorrelation,
) -> Result<(f64, Array2<f64>)> {
    let t = &target.matrix;
    if a.dim() != t.dim() {
        return Err(Error::shape(format!("{:?}", t.dim()), format!("{:?}", a.dim())));
    }
    if a.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite attention or target".into()));
    }
    let n = a.nrows();
    let mut grad = Array2::zeros(a.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let ar = a.row(i);
        let tr = t.row(i);
        let tn = tr.dot(&tr).sqrt();
        if tn == 0.0 {
            continue;
        }
        let an = ar.dot(&ar).sqrt();
        if an == 0.0 {
            return Err(Error::Numeric(format!("attention row {i} is all zero")));
        }
        let dot = ar.dot(&tr);
        total += dot / (an * tn);
        // d cos / d a = t/(‖a‖‖t‖) − (a·t) a/(‖a‖³‖t‖)
        let mut g = grad.row_mut(i);
        for j in 0..n {
            g[j] = -(tr[j] / (an * tn) - dot * ar[j] / (an * an * an * tn)) / n as f64;
        }
    }
    Ok((-total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn sample_covariance_examples() {
        let w = array![[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(sample_covariance(w.view()).unwrap(), Array2::<f64>::zeros((2, 2)));
        let w = array![[0.0], [2.0]];
        assert_eq!(sample_covariance(w.view()).unwrap(), array![[2.0]]);
        assert!(sample_covariance(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn fixed_shrinkage_examples() {
        let t = ShrinkageTarget::new(array![[4.0]], Intensity::Fixed(0.5)).unwrap();
        let w = array![[0.0], [2.0]];
        let s = ledoit_wolf_shrink(array![[2.0]].view(), &t, w.view()).unwrap();
        assert_eq!(s.cov, array![[3.0]]);
        let t = ShrinkageTarget::new(array![[4.0]], Intensity::Fixed(1.0)).unwrap();
        assert_eq!(ledoit_wolf_shrink(array![[2.0]].view(), &t, w.view()).unwrap().cov, array![[4.0]]);
        assert!(ShrinkageTarget::new(array![[4.0]], Intensity::Fixed(1.5)).is_err());
    }

    #[test]
    fn sample_equal_to_target_is_fixed_point() {
        let w = array![[0.1, -0.2], [0.3, 0.0], [-0.1, 0.4]];
        let s = sample_covariance(w.view()).unwrap();
        let t = ShrinkageTarget::new(s.clone(), Intensity::Analytic).unwrap();
        let out = ledoit_wolf_shrink(s.view(), &t, w.view()).unwrap();
        assert_eq!(out.delta, 1.0);
        assert_eq!(out.cov, s);
    }

    #[test]
    fn pi_hat_matches_direct_sum() {
        let w = array![[0.1, -0.2, 0.05], [0.3, 0.0, -0.1], [-0.1, 0.4, 0.2], [0.0, 0.1, 0.0]];
        let m = w.nrows();
        let mean = w.mean_axis(Axis(0)).unwrap();
        let mut direct = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let prods: Vec<f64> = (0..m).map(|t| (w[[t, i]] - mean[i]) * (w[[t, j]] - mean[j])).collect();
                let s = prods.iter().sum::<f64>() / m as f64;
                direct += prods.iter().map(|p| (p - s).powi(2)).sum::<f64>() / m as f64;
            }
        }
        assert_abs_diff_eq!(pi_hat(w.view()), direct, epsilon = 1e-15);
    }

    #[test]
    fn correlation_examples() {
        let c = covariance_to_correlation(array![[2.0, 0.0], [0.0, 3.0]].view()).unwrap();
        assert_eq!(c.matrix, Array2::<f64>::eye(2));
        let c = covariance_to_correlation(array![[1.0, 0.5], [0.5, 4.0]].view()).unwrap();
        assert_abs_diff_eq!(c.matrix[[0, 1]], 0.25, epsilon = 1e-15);
        assert_eq!(covariance_to_correlation(array![[7.0]].view()).unwrap().matrix, array![[1.0]]);
        assert!(matches!(
            covariance_to_correlation(array![[0.0]].view()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn guidance_loss_examples() {
        let t = TargetCorrelation {
            matrix: array![[1.0, 0.6], [0.6, 1.0]],
        };
        let l = correlation_guidance_loss(array![[1.0, 0.0], [0.0, 1.0]].view(), &t).unwrap();
        assert_abs_diff_eq!(l, -1.0 / 1.36f64.sqrt(), epsilon = 1e-15);
        let l = correlation_guidance_loss(array![[2.0, 1.2], [0.3, 0.5]].view(), &t).unwrap();
        assert_abs_diff_eq!(l, -1.0, epsilon = 1e-12);
        let t = TargetCorrelation {
            matrix: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let l = correlation_guidance_loss(array![[0.0, 1.0], [1.0, 0.0]].view(), &t).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_target_row_contributes_nothing() {
        let t = TargetCorrelation {
            matrix: array![[1.0, 0.0], [0.0, 0.0]],
        };
        let (l, g) = correlation_guidance_loss_grad(array![[0.5, 0.5], [0.2, 0.8]].view(), &t).unwrap();
        assert_abs_diff_eq!(l, -0.5 / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(g.row(1).to_vec(), vec![0.0, 0.0]);
    }
}
