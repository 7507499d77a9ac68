//! End-to-end orchestration: loading inputs, preparing datasets, training,
//! forecasting, baselines, scoring and backtests.

use std::ops::Range;
use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::characteristics::{compute_characteristics, CHARACTERISTIC_NAMES};
use crate::checkpoint::{Checkpoint, ScheduleSpec};
use crate::config::RunConfig;
use crate::data::{
    align_macro_daily, load_asset_covariates, load_macro, load_panel_with, split_panel, LoadOptions, MacroPanel,
    ReturnPanel, SplitIndices,
};
use crate::diffusion::{generate_ensemble, ChainSeeds, NoiseSchedule};
use crate::ensemble::{EnsembleSet, ForecastEnsemble};
use crate::error::{Error, Result};
use crate::guidance::{sample_covariance, ShrinkageTarget};
use crate::nn::{DenoiserConfig, DenoiserParams};
use crate::pipeline::{training_covariance, Dataset, PreparedData};
use crate::portfolio::{backtest, backtest_series, cholesky, solve_gop, solve_mvp, estimate_moments, BacktestReport, MvpSolution, PortfolioWeights};
use crate::scoring::{evaluate, rolling_yearly, ScoreReport};
use crate::train::{train, AdamW, TrainObserver, TrainOutcome};

/// Raw model inputs aligned to the panel dates.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub panel: ReturnPanel,
    pub covariate_names: Vec<String>,
    /// `T×N×Z`; NaN = undefined.
    pub asset_covs: Array3<f64>,
    pub sys_names: Vec<String>,
    /// `T×N_y` systematic covariates carried forward to daily dates.
    pub sys_daily: Array2<f64>,
}

/// Combines the panel with characteristics, external asset covariates and
/// systematic covariates.
pub fn assemble_inputs(
    panel: ReturnPanel,
    macro_panel: Option<&MacroPanel>,
    external: Option<(Vec<String>, Array3<f64>)>,
    use_characteristics: bool,
) -> Result<Inputs> {
    let (t, n) = (panel.len(), panel.n_assets());
    let mut names = Vec::new();
    let mut covs = Array3::<f64>::zeros((t, n, 0));
    if use_characteristics {
        let ch = compute_characteristics(&panel)?;
        names.extend(CHARACTERISTIC_NAMES.iter().map(|s| s.to_string()));
        covs = ch.values;
    }
    if let Some((ext_names, ext)) = external {
        if ext.dim().0 != t || ext.dim().1 != n {
            return Err(Error::shape(format!("{t}x{n}xZ"), format!("{:?}", ext.dim())));
        }
        names.extend(ext_names);
        covs = concatenate(Axis(2), &[covs.view(), ext.view()]).map_err(|e| Error::Data(e.to_string()))?;
    }
    let (sys_names, sys_daily) = match macro_panel {
        Some(m) => (m.names.clone(), align_macro_daily(&panel.dates, m)?),
        None => (Vec::new(), Array2::zeros((t, 0))),
    };
    Ok(Inputs {
        panel,
        covariate_names: names,
        asset_covs: covs,
        sys_names,
        sys_daily,
    })
}

/// Loads every input referenced by the configuration.
pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let returns = cfg.require("data.returns", &cfg.data.returns)?;
    let factors = cfg.require("data.factors", &cfg.data.factors)?;
    let panel = load_panel_with(returns, factors, &LoadOptions { units: cfg.data.units })?;
    let macro_panel = cfg.data.macro_path.as_deref().map(load_macro).transpose()?;
    let external = cfg
        .data
        .asset_covariates
        .as_deref()
        .map(|p| load_asset_covariates(p, &panel))
        .transpose()?;
    assemble_inputs(panel, macro_panel.as_ref(), external, cfg.data.use_characteristics)
}

/// One of the three chronological splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Prepared data plus everything derived from the training split.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub data: Arc<PreparedData>,
    pub split: SplitIndices,
    pub model: DenoiserConfig,
    pub train_cov: Array2<f64>,
    pub shrink: ShrinkageTarget,
    /// Market excess return (the `MKT` factor) per panel date.
    pub market: Vec<f64>,
}

impl Experiment {
    pub fn prepare(config: RunConfig, inputs: Inputs) -> Result<Self> {
        let spec = config.split.spec()?;
        let split = split_panel(&inputs.panel.dates, &spec)?;
        let market = inputs.panel.market().to_vec();
        let data = PreparedData::build(
            &inputs.panel,
            inputs.asset_covs,
            inputs.sys_daily,
            &split,
            config.data.prep_options(),
        )?;
        let model = config
            .model
            .denoiser(data.n_assets(), data.n_sys(), data.z_dim())?;
        let train_cov = training_covariance(&data, split.train.clone())?;
        let shrink = ShrinkageTarget::new(train_cov.clone(), config.guidance.intensity())?;
        Ok(Self {
            config,
            data: Arc::new(data),
            split,
            model,
            train_cov,
            shrink,
            market,
        })
    }

    /// Loads inputs from the configured paths and prepares them.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let inputs = load_inputs(&config)?;
        Self::prepare(config, inputs)
    }

    pub fn rows(&self, which: SplitName) -> Range<usize> {
        match which {
            SplitName::Train => self.split.train.clone(),
            SplitName::Val => self.split.val.clone(),
            SplitName::Test => self.split.test.clone(),
        }
    }

    /// Anchors whose targets fall in the split. Training windows stay inside
    /// the training rows; evaluation windows may reach back into earlier rows.
    pub fn dataset(&self, which: SplitName) -> Result<Dataset> {
        let inside = which == SplitName::Train;
        let anchors = self.data.anchors(self.rows(which), self.model.window, inside);
        Dataset::new(Arc::clone(&self.data), anchors, self.model.window, &self.shrink)
    }

    pub fn init_params(&self) -> Result<DenoiserParams> {
        DenoiserParams::init(&self.model, self.config.seed)
    }

    /// Trains from a fresh initialization; validation runs when the
    /// validation split has usable anchors.
    pub fn train(&self, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let train_set = self.dataset(SplitName::Train)?;
        if train_set.is_empty() {
            return Err(Error::Split("training split has no complete windows".into()));
        }
        let val = self.dataset(SplitName::Val)?;
        let val = (!val.is_empty()).then_some(val);
        train(
            self.init_params()?,
            &train_set,
            val.as_ref(),
            &self.config.train_config(),
            observer,
        )
    }

    pub fn checkpoint(&self, params: DenoiserParams, step: usize, optimizer: Option<AdamW>) -> Checkpoint {
        let t = &self.config.train;
        Checkpoint {
            params,
            schedule: ScheduleSpec {
                steps: t.diffusion_steps,
                beta_start: t.beta_start,
                beta_end: t.beta_end,
            },
            step,
            assets: self.data.assets.clone(),
            normalizers: self.data.norms.clone(),
            train_cov: self.train_cov.clone(),
            optimizer,
        }
    }

    /// Checks that a checkpoint was trained on data shaped like this run.
    pub fn check_compatible(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.assets != self.data.assets {
            return Err(Error::Checkpoint("checkpoint assets differ from the panel".into()));
        }
        let c = &ckpt.params.config;
        if (c.n_assets, c.n_sys, c.z_dim) != (self.model.n_assets, self.model.n_sys, self.model.z_dim) {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects N={} N_y={} Z={}, data has N={} N_y={} Z={}",
                c.n_assets, c.n_sys, c.z_dim, self.model.n_assets, self.model.n_sys, self.model.z_dim
            )));
        }
        Ok(())
    }

    /// Next-day forecast ensembles (excess-return units) for every anchor of a split.
    pub fn forecast(&self, ckpt: &Checkpoint, which: SplitName, k: usize, seed: u64) -> Result<EnsembleSet> {
        self.check_compatible(ckpt)?;
        let window = ckpt.params.config.window;
        let anchors = self.data.anchors(self.rows(which), window, false);
        if anchors.is_empty() {
            return Err(Error::Split(format!("{} split has no complete windows", which.as_str())));
        }
        let sched = NoiseSchedule::linear(ckpt.schedule.steps, ckpt.schedule.beta_start, ckpt.schedule.beta_end)?;
        let s = &self.config.sampling;
        let plan = crate::diffusion::DdimPlan::evenly_spaced(ckpt.schedule.steps, s.ddim_steps, s.eta)?;
        let records = anchors
            .iter()
            .map(|&t| {
                let ctx = self.data.context(t, window)?;
                let samples = generate_ensemble(
                    &ckpt.params,
                    &ctx,
                    &sched,
                    &plan,
                    k,
                    ChainSeeds::new(seed, t as u64),
                    Some(&ckpt.normalizers.target),
                )?;
                ForecastEnsemble::new(self.data.dates[t + 1], samples)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSet {
            assets: self.data.assets.clone(),
            records,
        })
    }

    /// Unconditional Gaussian fitted on training excess returns, sampled `k`
    /// times per date.
    pub fn climatology(&self, dates: &[NaiveDate], k: usize, seed: u64) -> Result<EnsembleSet> {
        let train = self.data.excess.slice(s![self.split.train.clone(), ..]);
        let mean = train.mean_axis(Axis(0)).expect("nonempty training split");
        let cov = sample_covariance(train)?;
        let n = mean.len();
        let chol = cholesky(&(cov + Array2::<f64>::eye(n) * crate::portfolio::RIDGE))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = dates
            .iter()
            .map(|&d| {
                let mut samples = Array2::<f64>::zeros((k, n));
                for mut row in samples.rows_mut() {
                    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    for i in 0..n {
                        row[i] = mean[i] + (0..=i).map(|j| chol[[i, j]] * z[j]).sum::<f64>();
                    }
                }
                ForecastEnsemble::new(d, samples)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSet {
            assets: self.data.assets.clone(),
            records,
        })
    }

    fn row_of(&self, d: NaiveDate) -> Result<usize> {
        self.data
            .dates
            .binary_search(&d)
            .map_err(|_| Error::Alignment(format!("ensemble date {d} is not a panel date")))
    }

    /// Realized excess returns on each ensemble date.
    pub fn realized(&self, set: &EnsembleSet) -> Result<Array2<f64>> {
        if set.assets != self.data.assets {
            return Err(Error::Alignment("ensemble assets differ from the panel".into()));
        }
        let idx = set
            .records
            .iter()
            .map(|r| self.row_of(r.date))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.data.excess.select(Axis(0), &idx))
    }

    /// Market excess return on each ensemble date.
    pub fn market_on(&self, set: &EnsembleSet) -> Result<Vec<f64>> {
        set.records
            .iter()
            .map(|r| self.row_of(r.date).map(|i| self.market[i]))
            .collect()
    }
}

/// Overall and rolling 3-year scores of an ensemble set.
pub fn score(real: &Array2<f64>, set: &EnsembleSet) -> Result<(ScoreReport, Vec<(i32, ScoreReport)>)> {
    Ok((evaluate(real.view(), &set.records)?, rolling_yearly(real.view(), &set.records)?))
}

/// Per-date portfolio solutions.
#[derive(Debug, Clone)]
pub struct PortfolioRun {
    pub dates: Vec<NaiveDate>,
    pub mvp: Vec<MvpSolution>,
    pub gop: Vec<PortfolioWeights>,
}

/// Solves MVP and GOP for every ensemble; dates are independent.
pub fn solve_portfolios(set: &EnsembleSet) -> Result<PortfolioRun> {
    let solved = set
        .records
        .par_iter()
        .map(|r| {
            let m = estimate_moments(r.samples.view())?;
            let mvp = solve_mvp(&m).map_err(|e| date_context(r.date, e))?;
            let gop = solve_gop(r.samples.view()).map_err(|e| date_context(r.date, e))?;
            Ok((mvp, gop))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mvp, gop) = solved.into_iter().unzip();
    Ok(PortfolioRun {
        dates: set.records.iter().map(|r| r.date).collect(),
        mvp,
        gop,
    })
}

fn date_context(d: NaiveDate, e: Error) -> Error {
    match e {
        Error::Feasibility(m) => Error::Feasibility(format!("{d}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{d}: {m}")),
        other => other,
    }
}

/// Backtests of the model portfolios and the market benchmark.
#[derive(Debug, Clone)]
pub struct BacktestSummary {
    pub mvp: BacktestReport,
    pub gop: BacktestReport,
    pub market: BacktestReport,
}

pub fn run_backtest(run: &PortfolioRun, realized: &Array2<f64>, market: &[f64]) -> Result<BacktestSummary> {
    let mvp_w: Vec<Vec<f64>> = run.mvp.iter().map(|s| s.weights.w.clone()).collect();
    let gop_w: Vec<Vec<f64>> = run.gop.iter().map(|w| w.w.clone()).collect();
    Ok(BacktestSummary {
        mvp: backtest(&mvp_w, realized.view())?,
        gop: backtest(&gop_w, realized.view())?,
        market: backtest_series(market)?,
    })
}

/// Weights CSV: `date`, one column per asset and, for MVP, the fallback flag.
pub fn write_weights_csv<W: std::io::Write>(
    assets: &[String],
    dates: &[NaiveDate],
    weights: &[&[f64]],
    fallback: Option<&[bool]>,
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let e = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["date".to_string()];
    header.extend(assets.iter().cloned());
    if fallback.is_some() {
        header.push("fallback".into());
    }
    wr.write_record(&header).map_err(e)?;
    for (i, (d, ws)) in dates.iter().zip(weights).enumerate() {
        let mut row = vec![d.to_string()];
        row.extend(ws.iter().map(|v| v.to_string()));
        if let Some(f) = fallback {
            row.push(f[i].to_string());
        }
        wr.write_record(&row).map_err(e)?;
    }
    wr.flush().map_err(|x| Error::Format(x.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec};

    fn small_experiment() -> Experiment {
        let syn = generate(&SyntheticSpec {
            days: 400,
            ..Default::default()
        })
        .unwrap();
        let inputs = assemble_inputs(
            syn.panel,
            Some(&syn.macro_panel),
            Some((syn.covariate_names, syn.covariates)),
            false,
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.split.train = ["2000-01-01".into(), "2000-09-30".into()];
        cfg.split.val = ["2000-10-01".into(), "2000-12-31".into()];
        cfg.split.test = ["2001-01-01".into(), "2001-12-31".into()];
        cfg.model.window = 5;
        cfg.model.hidden = 8;
        cfg.model.heads = 2;
        cfg.model.mlp_hidden = 8;
        cfg.model.step_embed_dim = 4;
        cfg.train.diffusion_steps = 20;
        cfg.sampling.ddim_steps = 5;
        Experiment::prepare(cfg, inputs).unwrap()
    }

    #[test]
    fn datasets_respect_split_boundaries() {
        let ex = small_experiment();
        let tr = ex.dataset(SplitName::Train).unwrap();
        let first = tr.anchors()[0];
        assert_eq!(first, ex.split.train.start + 4);
        assert!(tr.anchors().iter().all(|&t| t + 1 < ex.split.train.end));
        let te = ex.dataset(SplitName::Test).unwrap();
        assert_eq!(te.anchors()[0] + 1, ex.split.test.start);
    }

    #[test]
    fn forecast_dates_are_target_dates() {
        let ex = small_experiment();
        let ckpt = ex.checkpoint(ex.init_params().unwrap(), 0, None);
        let set = ex.forecast(&ckpt, SplitName::Val, 3, 1).unwrap();
        assert_eq!(set.records[0].date, ex.data.dates[ex.split.val.start]);
        assert_eq!(set.records.len(), ex.split.val.len());
        let real = ex.realized(&set).unwrap();
        assert_eq!(real.row(0), ex.data.excess.row(ex.split.val.start));
    }

    #[test]
    fn climatology_matches_training_moments() {
        let ex = small_experiment();
        let d = ex.data.dates[ex.split.test.start];
        let set = ex.climatology(&[d], 40_000, 3).unwrap();
        let s = &set.records[0].samples;
        let train = ex.data.excess.slice(s![ex.split.train.clone(), ..]);
        let cov = sample_covariance(train).unwrap();
        let got = sample_covariance(s.view()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((got[[i, j]] - cov[[i, j]]).abs() < 0.03 * cov[[i, i]].max(cov[[j, j]]));
            }
        }
    }

    #[test]
    fn incompatible_checkpoint_is_rejected() {
        let ex = small_experiment();
        let mut ckpt = ex.checkpoint(ex.init_params().unwrap(), 0, None);
        ckpt.assets[0] = "other".into();
        assert!(matches!(ex.forecast(&ckpt, SplitName::Val, 2, 0), Err(Error::Checkpoint(_))));
    }
}
