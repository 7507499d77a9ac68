//! Synthetic panel with known conditional structure.
//!
//! Four assets in two blocks with within-block noise correlation 0.6. Each
//! asset has one persistent covariate (`signal`) that shifts its next-day
//! mean, and a monthly systematic covariate shifts every asset's mean. The
//! risk-free rate is zero, MKT is the cross-sectional mean return and
//! SMB/HML are independent noise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Days, NaiveDate, Weekday};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{MacroPanel, ReturnPanel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub days: usize,
    pub seed: u64,
    pub start: NaiveDate,
    pub block_corr: f64,
    pub noise_sd: f64,
    pub drift: f64,
    /// Mean shift per unit of the asset covariate.
    pub signal_loading: f64,
    /// Mean shift per unit of the systematic covariate.
    pub macro_loading: f64,
    /// Daily AR(1) coefficient of the asset covariate.
    pub signal_persistence: f64,
    /// Monthly AR(1) coefficient of the systematic covariate.
    pub macro_persistence: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            days: 3000,
            seed: 7,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
            block_corr: 0.6,
            noise_sd: 0.01,
            drift: 3e-4,
            signal_loading: 0.006,
            macro_loading: 0.003,
            signal_persistence: 0.9,
            macro_persistence: 0.8,
        }
    }
}

pub const N_ASSETS: usize = 4;
/// Block membership of each asset.
pub const BLOCKS: [usize; N_ASSETS] = [0, 0, 1, 1];

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub panel: ReturnPanel,
    pub macro_panel: MacroPanel,
    pub covariate_names: Vec<String>,
    /// `T×N×1`, value at row `t` is known at the close of day `t`.
    pub covariates: Array3<f64>,
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

fn month_end(d: NaiveDate) -> NaiveDate {
    let (y, m) = if d.month() == 12 { (d.year() + 1, 1) } else { (d.year(), d.month() + 1) };
    NaiveDate::from_ymd_opt(y, m, 1).expect("valid date") - Days::new(1)
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.days < 2 {
        return Err(Error::config("synthetic.days", "need at least 2 days"));
    }
    if !(0.0..1.0).contains(&spec.block_corr) {
        return Err(Error::config("synthetic.block_corr", "must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let dates = business_days(spec.start, spec.days);

    // Monthly systematic covariate observed at each month end, starting the
    // month before the panel so every day has an observation.
    let first = month_end(spec.start.with_day(1).expect("day 1") - Days::new(1));
    let mut macro_dates = vec![first];
    while *macro_dates.last().expect("nonempty") < *dates.last().expect("nonempty") {
        let next = month_end(*macro_dates.last().expect("nonempty") + Days::new(1));
        macro_dates.push(next);
    }
    let phi_m = spec.macro_persistence;
    let mut macro_vals = Vec::with_capacity(macro_dates.len());
    let mut m = normal();
    for _ in &macro_dates {
        macro_vals.push(m);
        m = phi_m * m + (1.0 - phi_m * phi_m).sqrt() * normal();
    }

    let t_len = dates.len();
    let phi = spec.signal_persistence;
    let mut z = Array2::<f64>::zeros((t_len, N_ASSETS));
    let mut prev: Vec<f64> = (0..N_ASSETS).map(|_| normal()).collect();
    for t in 0..t_len {
        let f = [normal(), normal()];
        for i in 0..N_ASSETS {
            let shock = 0.8 * f[BLOCKS[i]] + 0.6 * normal();
            let v = if t == 0 { prev[i] } else { phi * prev[i] + (1.0 - phi * phi).sqrt() * shock };
            z[[t, i]] = v;
            prev[i] = v;
        }
    }

    let mut mi = 0;
    let mut y_daily = vec![0.0; t_len];
    for (t, d) in dates.iter().enumerate() {
        while mi + 1 < macro_dates.len() && macro_dates[mi + 1] <= *d {
            mi += 1;
        }
        y_daily[t] = macro_vals[mi];
    }

    let rho = spec.block_corr;
    let mut returns = Array2::<f64>::zeros((t_len, N_ASSETS));
    let mut factors = Array2::<f64>::zeros((t_len, 3));
    for t in 0..t_len {
        let f = [normal(), normal()];
        for i in 0..N_ASSETS {
            let e = rho.sqrt() * f[BLOCKS[i]] + (1.0 - rho).sqrt() * normal();
            let mean = if t == 0 {
                spec.drift
            } else {
                spec.drift + spec.signal_loading * z[[t - 1, i]] + spec.macro_loading * y_daily[t - 1]
            };
            returns[[t, i]] = mean + spec.noise_sd * e;
        }
        factors[[t, 0]] = returns.row(t).mean().expect("nonempty");
        factors[[t, 1]] = 0.005 * normal();
        factors[[t, 2]] = 0.005 * normal();
    }

    let assets: Vec<String> = (1..=N_ASSETS).map(|i| format!("A{i}")).collect();
    let panel = ReturnPanel::new(dates, assets, returns, Array1::zeros(t_len), factors)?;
    let macro_panel = MacroPanel {
        dates: macro_dates,
        names: vec!["y1".into()],
        values: Array2::from_shape_vec((macro_vals.len(), 1), macro_vals).expect("column"),
    };
    let covariates = z.insert_axis(ndarray::Axis(2));
    Ok(SyntheticData {
        panel,
        macro_panel,
        covariate_names: vec!["signal".into()],
        covariates,
    })
}

/// Paths of the files written by [`SyntheticData::write_to_dir`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub returns: PathBuf,
    pub factors: PathBuf,
    pub macro_path: PathBuf,
    pub asset_covariates: PathBuf,
}

impl SyntheticData {
    pub fn write_to_dir(&self, dir: &Path) -> Result<SyntheticFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.panel;
        let mut returns = format!("date,{},RF\n", p.assets.join(","));
        let mut factors = String::from("date,MKT,SMB,HML\n");
        for t in 0..p.len() {
            let row: Vec<String> = p.raw_returns.row(t).iter().map(|v| v.to_string()).collect();
            writeln!(returns, "{},{},{}", p.dates[t], row.join(","), p.risk_free[t]).expect("string write");
            let f = p.factors.row(t);
            writeln!(factors, "{},{},{},{}", p.dates[t], f[0], f[1], f[2]).expect("string write");
        }
        let mut macro_csv = format!("date,{}\n", self.macro_panel.names.join(","));
        for (d, row) in self.macro_panel.dates.iter().zip(self.macro_panel.values.rows()) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(macro_csv, "{d},{}", cells.join(",")).expect("string write");
        }
        let mut covs = format!("date,asset,{}\n", self.covariate_names.join(","));
        for t in 0..p.len() {
            for (i, a) in p.assets.iter().enumerate() {
                let cells: Vec<String> = (0..self.covariate_names.len())
                    .map(|k| self.covariates[[t, i, k]].to_string())
                    .collect();
                writeln!(covs, "{},{a},{}", p.dates[t], cells.join(",")).expect("string write");
            }
        }
        let files = SyntheticFiles {
            returns: dir.join("returns.csv"),
            factors: dir.join("factors.csv"),
            macro_path: dir.join("macro.csv"),
            asset_covariates: dir.join("asset_covariates.csv"),
        };
        for (path, text) in [
            (&files.returns, returns),
            (&files.factors, factors),
            (&files.macro_path, macro_csv),
            (&files.asset_covariates, covs),
        ] {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(files)
    }
}

/// Run configuration for the files written by [`SyntheticData::write_to_dir`]
/// with the desk-scale model used by the end-to-end check. Paths are
/// relative to the directory holding the configuration.
pub fn fixture_config(data: &SyntheticData) -> String {
    let dates = &data.panel.dates;
    let last = dates.last().expect("nonempty panel");
    let start = dates[0];
    let train_end = NaiveDate::from_ymd_opt(2007, 12, 31).expect("valid date");
    let (train, val, test) = if start.year() == 2000 && last.year() >= 2010 {
        (
            (start.to_string(), train_end.to_string()),
            ("2008-01-01".to_string(), "2008-12-31".to_string()),
            ("2009-01-01".to_string(), last.to_string()),
        )
    } else {
        // Proportional 70/10/20 split for other fixture lengths.
        let t = dates.len();
        let a = t * 7 / 10;
        let b = t * 8 / 10;
        (
            (start.to_string(), dates[a - 1].to_string()),
            (dates[a].to_string(), dates[b - 1].to_string()),
            (dates[b].to_string(), last.to_string()),
        )
    };
    format!(
        r#"seed = 0
output_dir = "run"

[data]
returns = "returns.csv"
factors = "factors.csv"
macro = "macro.csv"
asset_covariates = "asset_covariates.csv"
use_characteristics = false

[split]
train = ["{}", "{}"]
val = ["{}", "{}"]
test = ["{}", "{}"]

[model]
window = 21
hidden = 32
heads = 2
mlp_hidden = 64
step_embed_dim = 16

[train]
steps = 5000
batch = 32
lr_max = 1e-3
warmup = 100
diffusion_steps = 200
beta_start = 2e-4
beta_end = 0.04
val_every = 1000
val_samples = 8
val_ddim_steps = 20
val_max_dates = 50
checkpoint_every = 1000

[sampling]
ddim_steps = 20
k = 64
"#,
        train.0, train.1, val.0, val.1, test.0, test.1
    )
}
