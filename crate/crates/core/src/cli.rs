//! Command-line front end.
//!
//! Every subcommand reads a run configuration and writes its artifacts under
//! the configured output directory:
//!
//! | subcommand | artifacts |
//! |------------|-----------|
//! | `ingest`   | `inputs.json` (or the synthetic fixture with `--synthetic`) |
//! | `features` | `characteristics.csv` |
//! | `train`    | `train_log.csv`, `checkpoints/last.ckpt`, `checkpoints/best.ckpt` |
//! | `sample`   | `ensembles_<split>.csv` (or `.bin`) |
//! | `evaluate` | `scores_<split>.csv` |
//! | `backtest` | `weights_mvp.csv`, `weights_gop.csv`, `backtest.csv` |
//! | `report`   | `report/` with score and backtest CSVs plus SVG figures |

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::characteristics::{compute_characteristics, write_characteristics_csv};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::load_panel_with;
use crate::data::LoadOptions;
use crate::ensemble::EnsembleSet;
use crate::error::{Error, Result};
use crate::experiment::{run_backtest, score, solve_portfolios, write_weights_csv, Experiment, SplitName};
use crate::plot::{line_chart, Series};
use crate::portfolio::write_report_csv;
use crate::scoring::write_score_csv;
use crate::synthetic::{fixture_config, generate, SyntheticSpec};
use crate::train::{write_log, LogRow, TrainObserver, TrainState};

#[derive(Debug, Parser)]
#[command(name = "diffport", version, about = "Diffusion forecasts of daily returns and portfolio backtests")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "DIFFPORT_THREADS")]
    pub threads: Option<usize>,
    /// Ordered reductions so repeated runs are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Overrides the configuration seed.
    #[arg(long, global = true, env = "DIFFPORT_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnsembleFormat {
    Csv,
    Bin,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub cfg: ConfigArg,
    /// Ensemble file (default: `<output_dir>/ensembles_<split>.csv`).
    #[arg(long)]
    pub ensembles: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the inputs, or write the bundled synthetic fixture.
    Ingest {
        #[arg(long, required_unless_present = "synthetic")]
        config: Option<PathBuf>,
        /// Write the synthetic fixture and a ready configuration to `--out`.
        #[arg(long, requires = "out")]
        synthetic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3000)]
        days: usize,
    },
    /// Compute the return-based characteristics.
    Features(ConfigArg),
    /// Train the denoiser.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw forecast ensembles for a split.
    Sample {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Checkpoint file (default: `<output_dir>/checkpoints/last.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Overrides `sampling.k`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: EnsembleFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score ensembles against realized returns and the climatology baseline.
    Evaluate(EnsembleArgs),
    /// Solve MVP and GOP portfolios and backtest them.
    Backtest(EnsembleArgs),
    /// Scores, backtest statistics and figures.
    Report(EnsembleArgs),
}

/// Parses `argv` (including the program name) and runs it; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // The global pool can be built once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn create_file(p: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    std::fs::File::create(p)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(p, e))
}

fn default_ensembles(cfg: &RunConfig, split: SplitName) -> PathBuf {
    cfg.output_dir.join(format!("ensembles_{}.csv", split.as_str()))
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest {
            config,
            synthetic,
            out,
            days,
        } => {
            if *synthetic {
                let out = out.as_deref().expect("clap enforces --out");
                let spec = SyntheticSpec {
                    days: *days,
                    seed: cli.seed.unwrap_or(SyntheticSpec::default().seed),
                    ..Default::default()
                };
                let data = generate(&spec)?;
                data.write_to_dir(out)?;
                let cfg_path = out.join("synthetic.toml");
                std::fs::write(&cfg_path, fixture_config(&data)).map_err(|e| Error::io(&cfg_path, e))?;
                println!("wrote synthetic fixture and {}", cfg_path.display());
                return Ok(());
            }
            let cfg = load_config(cli, config.as_deref().expect("clap enforces --config"))?;
            ingest(&cfg)
        }
        Command::Features(a) => {
            let cfg = load_config(cli, &a.config)?;
            let panel = load_panel_with(
                cfg.require("data.returns", &cfg.data.returns)?,
                cfg.require("data.factors", &cfg.data.factors)?,
                &LoadOptions { units: cfg.data.units },
            )?;
            let chars = compute_characteristics(&panel)?;
            let path = cfg.output_dir.join("characteristics.csv");
            write_characteristics_csv(&panel, &chars, create_file(&path)?)?;
            println!(
                "wrote {} (all columns defined from {})",
                path.display(),
                panel.dates[chars.valid_from.min(panel.len() - 1)]
            );
            Ok(())
        }
        Command::Train { cfg, steps } => {
            let mut rc = load_config(cli, &cfg.config)?;
            if let Some(s) = steps {
                rc.train.steps = *s;
                rc.train.warmup = rc.train.warmup.min(s.saturating_sub(1));
            }
            rc.validate()?;
            train(rc)
        }
        Command::Sample {
            cfg,
            checkpoint,
            split,
            k,
            format,
            out,
        } => {
            let mut rc = load_config(cli, &cfg.config)?;
            if let Some(k) = k {
                rc.sampling.k = *k;
            }
            rc.validate()?;
            let split = SplitName::from(*split);
            let ckpt_path = checkpoint
                .clone()
                .unwrap_or_else(|| rc.output_dir.join("checkpoints").join("last.ckpt"));
            let out = out.clone().unwrap_or_else(|| {
                let p = default_ensembles(&rc, split);
                match format {
                    EnsembleFormat::Csv => p,
                    EnsembleFormat::Bin => p.with_extension("bin"),
                }
            });
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let (k, seed) = (rc.sampling.k, rc.seed);
            let ex = Experiment::from_config(rc)?;
            let set = ex.forecast(&ckpt, split, k, seed)?;
            if let Some(parent) = out.parent() {
                create_dir(parent)?;
            }
            match format {
                EnsembleFormat::Csv => set.write_csv(create_file(&out)?)?,
                EnsembleFormat::Bin => set.write_binary(create_file(&out)?)?,
            }
            println!("wrote {} ensembles to {}", set.records.len(), out.display());
            Ok(())
        }
        Command::Evaluate(a) => {
            let (ex, set, split) = load_ensembles(cli, a)?;
            let path = ex.config.output_dir.join(format!("scores_{}.csv", split.as_str()));
            write_scores(&ex, &set, &path)
        }
        Command::Backtest(a) => {
            let (ex, set, _) = load_ensembles(cli, a)?;
            write_backtest(&ex, &set, &ex.config.output_dir.clone())?;
            Ok(())
        }
        Command::Report(a) => {
            let (ex, set, _) = load_ensembles(cli, a)?;
            report(&ex, &set)
        }
    }
}

#[derive(Serialize)]
struct IngestSummary {
    dates: usize,
    first_date: String,
    last_date: String,
    assets: Vec<String>,
    asset_covariates: Vec<String>,
    systematic_covariates: Vec<String>,
    train_rows: usize,
    val_rows: usize,
    test_rows: usize,
    train_anchors: usize,
    val_anchors: usize,
    test_anchors: usize,
}

fn ingest(cfg: &RunConfig) -> Result<()> {
    let inputs = crate::experiment::load_inputs(cfg)?;
    let cov_names = inputs.covariate_names.clone();
    let sys_names = inputs.sys_names.clone();
    let ex = Experiment::prepare(cfg.clone(), inputs)?;
    let anchors = |s| ex.dataset(s).map(|d| d.len());
    let summary = IngestSummary {
        dates: ex.data.len(),
        first_date: ex.data.dates[0].to_string(),
        last_date: ex.data.dates[ex.data.len() - 1].to_string(),
        assets: ex.data.assets.clone(),
        asset_covariates: cov_names,
        systematic_covariates: sys_names,
        train_rows: ex.split.train.len(),
        val_rows: ex.split.val.len(),
        test_rows: ex.split.test.len(),
        train_anchors: anchors(SplitName::Train)?,
        val_anchors: anchors(SplitName::Val)?,
        test_anchors: anchors(SplitName::Test)?,
    };
    let path = cfg.output_dir.join("inputs.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    create_dir(&cfg.output_dir)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    println!("inputs valid; summary in {}", path.display());
    Ok(())
}

struct CheckpointWriter<'a> {
    ex: &'a Experiment,
    dir: PathBuf,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        if row.step % 100 == 0 || row.val_es.is_some() {
            log::info!(
                "step {} lr {:.2e} mse {:.5} l_corr {:.4}{}",
                row.step,
                row.lr,
                row.mse,
                row.l_corr,
                row.val_es.map(|v| format!(" val_es {v:.5}")).unwrap_or_default()
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        let ck = self
            .ex
            .checkpoint(state.params.clone(), state.step, Some(state.optimizer.clone()));
        ck.save(&self.dir.join("last.ckpt"))
    }
}

fn train(cfg: RunConfig) -> Result<()> {
    let ex = Experiment::from_config(cfg)?;
    let out = ex.config.output_dir.clone();
    let ck_dir = out.join("checkpoints");
    create_dir(&ck_dir)?;
    std::fs::write(out.join("config.toml"), ex.config.to_toml()).map_err(|e| Error::io(&out, e))?;
    let mut obs = CheckpointWriter {
        ex: &ex,
        dir: ck_dir.clone(),
    };
    let outcome = ex.train(&mut obs)?;
    write_log(&outcome.log, create_file(&out.join("train_log.csv"))?)?;
    let last = &outcome.last;
    ex.checkpoint(last.params.clone(), last.step, Some(last.optimizer.clone()))
        .save(&ck_dir.join("last.ckpt"))?;
    if let Some((step, params, es)) = outcome.best {
        ex.checkpoint(params, step, None).save(&ck_dir.join("best.ckpt"))?;
        println!("best validation energy score {es:.6} at step {step}");
    }
    println!("trained {} steps; checkpoints in {}", last.step, ck_dir.display());
    Ok(())
}

fn load_ensembles(cli: &Cli, a: &EnsembleArgs) -> Result<(Experiment, EnsembleSet, SplitName)> {
    let cfg = load_config(cli, &a.cfg.config)?;
    let split = SplitName::from(a.split);
    let path = a.ensembles.clone().unwrap_or_else(|| default_ensembles(&cfg, split));
    let set = EnsembleSet::load(&path)?;
    if set.records.is_empty() {
        return Err(Error::Data(format!("{} holds no ensembles", path.display())));
    }
    let ex = Experiment::from_config(cfg)?;
    Ok((ex, set, split))
}

fn write_scores(ex: &Experiment, set: &EnsembleSet, path: &Path) -> Result<()> {
    let real = ex.realized(set)?;
    let (overall, yearly) = score(&real, set)?;
    let dates: Vec<_> = set.records.iter().map(|r| r.date).collect();
    let clim = ex.climatology(&dates, set.records[0].k(), ex.config.seed)?;
    let (c_overall, c_yearly) = score(&real, &clim)?;
    let mut buf = Vec::new();
    write_score_csv("model", &overall, &yearly, &mut buf)?;
    let mut cbuf = Vec::new();
    write_score_csv("climatology", &c_overall, &c_yearly, &mut cbuf)?;
    // Drop the repeated header of the second block.
    let skip = cbuf.iter().position(|b| *b == b'\n').map_or(0, |i| i + 1);
    buf.extend_from_slice(&cbuf[skip..]);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    println!(
        "CRPS {:.6} (climatology {:.6}), ES {:.6} (climatology {:.6}); wrote {}",
        overall.crps_mean,
        c_overall.crps_mean,
        overall.es,
        c_overall.es,
        path.display()
    );
    Ok(())
}

fn write_backtest(ex: &Experiment, set: &EnsembleSet, dir: &Path) -> Result<crate::experiment::BacktestSummary> {
    create_dir(dir)?;
    let run = solve_portfolios(set)?;
    let real = ex.realized(set)?;
    let market = ex.market_on(set)?;
    let summary = run_backtest(&run, &real, &market)?;
    let mvp_w: Vec<&[f64]> = run.mvp.iter().map(|s| s.weights.w.as_slice()).collect();
    let fallback: Vec<bool> = run.mvp.iter().map(|s| s.fallback).collect();
    let gop_w: Vec<&[f64]> = run.gop.iter().map(|w| w.w.as_slice()).collect();
    write_weights_csv(&set.assets, &run.dates, &mvp_w, Some(&fallback), create_file(&dir.join("weights_mvp.csv"))?)?;
    write_weights_csv(&set.assets, &run.dates, &gop_w, None, create_file(&dir.join("weights_gop.csv"))?)?;
    write_report_csv(
        &[("mvp", &summary.mvp), ("gop", &summary.gop), ("market", &summary.market)],
        create_file(&dir.join("backtest.csv"))?,
    )?;
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    println!(
        "MVP SR {} | GOP SR {} CE {} | market SR {}; {} fallback dates",
        fmt(summary.mvp.sr),
        fmt(summary.gop.sr),
        fmt(summary.gop.ce),
        fmt(summary.market.sr),
        fallback.iter().filter(|f| **f).count()
    );
    Ok(summary)
}

fn report(ex: &Experiment, set: &EnsembleSet) -> Result<()> {
    let dir = ex.config.output_dir.join("report");
    create_dir(&dir)?;
    write_scores(ex, set, &dir.join("scores.csv"))?;
    let bt = write_backtest(ex, set, &dir)?;
    let dates: Vec<_> = set.records.iter().map(|r| r.date).collect();
    line_chart(
        &dir.join("cumulative_returns.svg"),
        "Cumulative value of daily rebalanced portfolios",
        "portfolio value",
        &[
            Series::value_path("MVP", &dates, &bt.mvp.value_path),
            Series::value_path("GOP", &dates, &bt.gop.value_path),
            Series::value_path("Market", &dates, &bt.market.value_path),
        ],
    )?;
    let real = ex.realized(set)?;
    let (_, yearly) = score(&real, set)?;
    let clim = ex.climatology(&dates, set.records[0].k(), ex.config.seed)?;
    let (_, c_yearly) = score(&real, &clim)?;
    let pick = |rows: &[(i32, crate::scoring::ScoreReport)], f: fn(&crate::scoring::ScoreReport) -> Option<f64>| {
        rows.iter()
            .filter_map(|(y, r)| f(r).map(|v| (*y, v)))
            .collect::<Vec<_>>()
    };
    for (name, label, f) in [
        ("rolling_crps.svg", "CRPS", (|r| Some(r.crps_mean)) as fn(&crate::scoring::ScoreReport) -> Option<f64>),
        ("rolling_es.svg", "Energy score", |r| Some(r.es)),
        ("rolling_corr_score.svg", "CorrScore", |r| r.corr_score),
    ] {
        line_chart(
            &dir.join(name),
            &format!("Rolling 3-year {label}"),
            label,
            &[
                Series::yearly("model", &pick(&yearly, f)),
                Series::yearly("climatology", &pick(&c_yearly, f)),
            ],
        )?;
    }
    let sharpe = |daily: &[f64]| -> Vec<(i32, f64)> {
        rolling_sharpe(&dates, daily)
    };
    line_chart(
        &dir.join("rolling_sharpe.svg"),
        "Rolling 3-year Sharpe ratio",
        "Sharpe ratio",
        &[
            Series::yearly("MVP", &sharpe(&bt.mvp.daily_returns)),
            Series::yearly("GOP", &sharpe(&bt.gop.daily_returns)),
            Series::yearly("Market", &sharpe(&bt.market.daily_returns)),
        ],
    )?;
    println!("report written to {}", dir.display());
    Ok(())
}

/// Annualized Sharpe ratio over trailing 3-calendar-year windows.
fn rolling_sharpe(dates: &[chrono::NaiveDate], daily: &[f64]) -> Vec<(i32, f64)> {
    use chrono::Datelike;
    let mut years: Vec<i32> = dates.iter().map(|d| d.year()).collect();
    years.dedup();
    years
        .into_iter()
        .filter_map(|y| {
            let sel: Vec<f64> = dates
                .iter()
                .zip(daily)
                .filter(|(d, _)| (y - 2..=y).contains(&d.year()))
                .map(|(_, r)| *r)
                .collect();
            crate::portfolio::backtest_series(&sel).ok()?.sr.map(|s| (y, s))
        })
        .collect()
}
