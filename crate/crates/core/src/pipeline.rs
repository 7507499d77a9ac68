//! Model-ready inputs: standardized series, fitted normalizers, and the
//! anchor-indexed datasets used for training, validation and forecasting.

use std::ops::Range;
use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, ReturnPanel, SplitIndices};
use crate::error::{Error, Result};
use crate::guidance::{sample_covariance, target_correlation, ShrinkageTarget, TargetCorrelation};
use crate::nn::ConditioningBundle;

/// Normalizers fitted on the training rows; persisted with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    /// Per-asset excess-return standardization (identity when disabled).
    pub target: Normalizer,
    /// Per asset-covariate column, pooled across assets.
    pub asset: Normalizer,
    /// Per systematic covariate column.
    pub sys: Normalizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepOptions {
    pub standardize_targets: bool,
    /// Replace undefined asset covariates by 0 after normalization instead of
    /// excluding the affected dates.
    pub zero_fill_undefined: bool,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            standardize_targets: true,
            zero_fill_undefined: false,
        }
    }
}

/// Full-length model inputs aligned with the panel dates.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// Excess returns in decimal units (`T×N`).
    pub excess: Array2<f64>,
    /// Model-space returns (`T×N`).
    pub returns: Array2<f64>,
    /// Normalized asset covariates (`T×N×Z`); NaN = undefined.
    pub asset_covs: Array3<f64>,
    /// Normalized systematic covariates (`T×N_y`).
    pub sys: Array2<f64>,
    pub norms: Normalizers,
}

fn pooled_rows(covs: &Array3<f64>, rows: Range<usize>) -> Array2<f64> {
    let (_, n, z) = covs.dim();
    let block = covs.slice(s![rows.clone(), .., ..]);
    block
        .to_owned()
        .into_shape_with_order((rows.len() * n, z))
        .expect("contiguous slice")
}

impl PreparedData {
    /// Fits normalizers on `split.train` and applies them to every row.
    pub fn build(
        panel: &ReturnPanel,
        asset_covs: Array3<f64>,
        sys_daily: Array2<f64>,
        split: &SplitIndices,
        opts: PrepOptions,
    ) -> Result<Self> {
        let (t, n) = panel.excess_returns.dim();
        if asset_covs.dim().0 != t || asset_covs.dim().1 != n {
            return Err(Error::shape(
                format!("{t}x{n}xZ asset covariates"),
                format!("{:?}", asset_covs.dim()),
            ));
        }
        if sys_daily.nrows() != t {
            return Err(Error::shape(t, sys_daily.nrows()));
        }
        let train = split.train.clone();
        let target = if opts.standardize_targets {
            Normalizer::fit(panel.excess_returns.slice(s![train.clone(), ..]))?
        } else {
            Normalizer {
                mean: vec![0.0; n],
                std: vec![1.0; n],
            }
        };
        let returns = target.apply(panel.excess_returns.view())?;

        let z = asset_covs.dim().2;
        let asset = if z == 0 {
            Normalizer {
                mean: vec![],
                std: vec![],
            }
        } else {
            Normalizer::fit_finite_rows(pooled_rows(&asset_covs, train.clone()).view())?
        };
        let mut covs = asset_covs;
        for mut lane in covs.lanes_mut(Axis(2)) {
            for (k, v) in lane.iter_mut().enumerate() {
                if v.is_finite() {
                    *v = (*v - asset.mean[k]) / asset.std[k];
                } else if opts.zero_fill_undefined {
                    *v = 0.0;
                }
            }
        }

        if sys_daily.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("undefined systematic covariate".into()));
        }
        let sys_norm = if sys_daily.ncols() == 0 {
            Normalizer {
                mean: vec![],
                std: vec![],
            }
        } else {
            Normalizer::fit(sys_daily.slice(s![train, ..]))?
        };
        let sys = sys_norm.apply(sys_daily.view())?;

        Ok(Self {
            dates: panel.dates.clone(),
            assets: panel.assets.clone(),
            excess: panel.excess_returns.clone(),
            returns,
            asset_covs: covs,
            sys,
            norms: Normalizers {
                target,
                asset,
                sys: sys_norm,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.excess.ncols()
    }

    pub fn z_dim(&self) -> usize {
        self.asset_covs.dim().2
    }

    pub fn n_sys(&self) -> usize {
        self.sys.ncols()
    }

    /// Conditioning window ending at anchor `t` (rows `t−M+1..=t`).
    pub fn context(&self, t: usize, window: usize) -> Result<ConditioningBundle> {
        if t + 1 < window || t >= self.len() {
            return Err(Error::Context(format!("no {window}-day window ends at row {t}")));
        }
        let rows = t + 1 - window..t + 1;
        Ok(ConditioningBundle {
            hist: self.returns.slice(s![rows.clone(), ..]).to_owned(),
            asset_covs: self.asset_covs.slice(s![rows.clone(), .., ..]).to_owned(),
            sys: self.sys.slice(s![rows, ..]).to_owned(),
        })
    }

    fn window_defined(&self, t: usize, window: usize) -> bool {
        let rows = t + 1 - window..t + 1;
        self.asset_covs
            .slice(s![rows, .., ..])
            .iter()
            .all(|v| v.is_finite())
    }

    /// Anchors `t` whose target row `t+1` lies in `targets` and whose window
    /// is fully defined. With `window_inside` the window must also start at
    /// or after `targets.start`.
    pub fn anchors(&self, targets: Range<usize>, window: usize, window_inside: bool) -> Vec<usize> {
        let lo = if window_inside { targets.start + window - 1 } else { window - 1 };
        (targets.start.saturating_sub(1).max(lo)..targets.end.saturating_sub(1))
            .filter(|&t| t + 1 >= targets.start && self.window_defined(t, window))
            .collect()
    }
}

/// Excess-return covariance over the training rows.
pub fn training_covariance(data: &PreparedData, train: Range<usize>) -> Result<Array2<f64>> {
    sample_covariance(data.excess.slice(s![train, ..]))
}

/// One training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub t_index: usize,
    /// Model-space next-day returns.
    pub x0: Vec<f64>,
    pub ctx: ConditioningBundle,
    pub target: TargetCorrelation,
}

/// Anchors over shared prepared data, with target correlations cached by anchor.
#[derive(Debug, Clone)]
pub struct Dataset {
    data: Arc<PreparedData>,
    window: usize,
    anchors: Vec<usize>,
    targets: Vec<TargetCorrelation>,
}

impl Dataset {
    pub fn new(data: Arc<PreparedData>, anchors: Vec<usize>, window: usize, shrink: &ShrinkageTarget) -> Result<Self> {
        if shrink.dim() != data.n_assets() {
            return Err(Error::shape(data.n_assets(), shrink.dim()));
        }
        let targets = anchors
            .iter()
            .map(|&t| {
                if t + 1 < window || t + 1 >= data.len() {
                    return Err(Error::Context(format!("anchor {t} out of range")));
                }
                target_correlation(shrink, data.excess.slice(s![t + 1 - window..t + 1, ..]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            data,
            window,
            anchors,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn get(&self, i: usize) -> Result<TrainSample> {
        let t = self.anchors[i];
        Ok(TrainSample {
            t_index: t,
            x0: self.data.returns.row(t + 1).to_vec(),
            ctx: self.data.context(t, self.window)?,
            target: self.targets[i].clone(),
        })
    }

    /// At most `max` anchors, evenly spread over the original ones.
    pub fn thinned(&self, max: usize) -> Dataset {
        if self.len() <= max || max == 0 {
            return self.clone();
        }
        let idx: Vec<usize> = (0..max).map(|k| k * self.len() / max).collect();
        Dataset {
            data: Arc::clone(&self.data),
            window: self.window,
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}
