//! Return panel, macro covariates, date splits and column normalization.
//!
//! All returns are decimal (0.0123 = 1.23%). Excess returns are always
//! derived here from raw returns and the risk-free column so that the
//! inputs stay auditable.

use std::collections::HashMap;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FACTOR_NAMES: [&str; 3] = ["MKT", "SMB", "HML"];
pub const MACRO_NAMES: [&str; 8] = ["tbl", "dp", "ep", "bm", "tms", "dfy", "ntis", "svar"];

/// Floor applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// What to do when returns look percent-formatted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitsPolicy {
    #[default]
    Warn,
    Error,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub units: UnitsPolicy,
}

/// Date-indexed asset returns with the risk-free rate and the three factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub raw_returns: Array2<f64>,
    pub risk_free: Array1<f64>,
    /// Columns: MKT (market excess), SMB, HML.
    pub factors: Array2<f64>,
    pub excess_returns: Array2<f64>,
}

impl ReturnPanel {
    /// Builds a panel, deriving excess returns and checking every invariant.
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        raw_returns: Array2<f64>,
        risk_free: Array1<f64>,
        factors: Array2<f64>,
    ) -> Result<Self> {
        let t = dates.len();
        if raw_returns.nrows() != t || risk_free.len() != t || factors.nrows() != t {
            return Err(Error::shape(
                format!("{t} rows everywhere"),
                format!(
                    "returns {}, rf {}, factors {}",
                    raw_returns.nrows(),
                    risk_free.len(),
                    factors.nrows()
                ),
            ));
        }
        if raw_returns.ncols() != assets.len() {
            return Err(Error::shape(assets.len(), raw_returns.ncols()));
        }
        if factors.ncols() != 3 {
            return Err(Error::shape(3, factors.ncols()));
        }
        check_increasing(&dates, "panel")?;
        for v in raw_returns.iter().chain(risk_free.iter()).chain(factors.iter()) {
            if !v.is_finite() {
                return Err(Error::Data("non-finite cell in return panel".into()));
            }
        }
        let mut excess_returns = raw_returns.clone();
        for (mut row, rf) in excess_returns.rows_mut().into_iter().zip(risk_free.iter()) {
            row.mapv_inplace(|r| r - rf);
        }
        Ok(Self {
            dates,
            assets,
            raw_returns,
            risk_free,
            factors,
            excess_returns,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// Market excess return series (the MKT factor column).
    pub fn market(&self) -> ndarray::ArrayView1<'_, f64> {
        self.factors.column(0)
    }

    /// Keeps only the rows in `range`.
    pub fn slice_rows(&self, range: Range<usize>) -> ReturnPanel {
        let s = ndarray::s![range.clone(), ..];
        ReturnPanel {
            dates: self.dates[range.clone()].to_vec(),
            assets: self.assets.clone(),
            raw_returns: self.raw_returns.slice(s).to_owned(),
            risk_free: self.risk_free.slice(ndarray::s![range]).to_owned(),
            factors: self.factors.slice(s).to_owned(),
            excess_returns: self.excess_returns.slice(s).to_owned(),
        }
    }
}

/// Monthly systematic covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroPanel {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

fn check_increasing(dates: &[NaiveDate], what: &str) -> Result<()> {
    for w in dates.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Data(format!(
                "{what} dates must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

pub fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date `{s}`: {e}"))
}

fn parse_cell(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("bad number `{s}`"))?;
    if v.is_nan() {
        return Err("NaN cell".into());
    }
    if !v.is_finite() {
        return Err(format!("non-finite cell `{s}`"));
    }
    Ok(v)
}

/// A parsed `date,<col...>` table.
struct DatedTable {
    header: Vec<String>,
    dates: Vec<NaiveDate>,
    rows: Vec<Vec<f64>>,
}

fn read_dated_table<R: Read>(reader: R, file: &str) -> Result<DatedTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            file: file.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(|h| h.to_ascii_lowercase()) != Some("date".into()) || header.len() < 2 {
        return Err(Error::Parse {
            file: file.into(),
            line: 1,
            msg: "header must start with `date` followed by at least one column".into(),
        });
    }
    let mut dates = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            file: file.into(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let perr = |msg: String| {
            if msg == "NaN cell" {
                Error::Data(format!("{file} line {line}: NaN cell"))
            } else {
                Error::Parse {
                    file: file.into(),
                    line,
                    msg,
                }
            }
        };
        if rec.len() != header.len() {
            return Err(perr(format!(
                "expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        dates.push(parse_date(&rec[0]).map_err(perr)?);
        let vals = rec
            .iter()
            .skip(1)
            .map(parse_cell)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(perr)?;
        rows.push(vals);
    }
    check_increasing(&dates, file)?;
    Ok(DatedTable { header, dates, rows })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Loads returns (`date,<assets...>,RF`) and factors (`date,MKT,SMB,HML`) and
/// inner-joins them on date.
pub fn load_panel(returns_path: &Path, factors_path: &Path) -> Result<ReturnPanel> {
    load_panel_with(returns_path, factors_path, &LoadOptions::default())
}

pub fn load_panel_with(
    returns_path: &Path,
    factors_path: &Path,
    opts: &LoadOptions,
) -> Result<ReturnPanel> {
    panel_from_readers(
        open(returns_path)?,
        &returns_path.display().to_string(),
        open(factors_path)?,
        &factors_path.display().to_string(),
        opts,
    )
}

pub fn panel_from_readers<R1: Read, R2: Read>(
    returns: R1,
    returns_name: &str,
    factors: R2,
    factors_name: &str,
    opts: &LoadOptions,
) -> Result<ReturnPanel> {
    let ret = read_dated_table(returns, returns_name)?;
    if ret.header.last().map(String::as_str) != Some("RF") || ret.header.len() < 3 {
        return Err(Error::Parse {
            file: returns_name.into(),
            line: 1,
            msg: "returns header must be `date,<asset_1>,...,<asset_N>,RF`".into(),
        });
    }
    let fac = read_dated_table(factors, factors_name)?;
    let expected: Vec<&str> = std::iter::once("date").chain(FACTOR_NAMES).collect();
    if fac.header.iter().map(String::as_str).collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            file: factors_name.into(),
            line: 1,
            msg: "factors header must be `date,MKT,SMB,HML`".into(),
        });
    }

    let assets: Vec<String> = ret.header[1..ret.header.len() - 1].to_vec();
    let n = assets.len();
    let fac_index: HashMap<NaiveDate, usize> =
        fac.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let mut dates = Vec::new();
    let mut raw = Vec::new();
    let mut rf = Vec::new();
    let mut factors = Vec::new();
    for (d, row) in ret.dates.iter().zip(&ret.rows) {
        if let Some(&j) = fac_index.get(d) {
            dates.push(*d);
            raw.extend_from_slice(&row[..n]);
            rf.push(row[n]);
            factors.extend_from_slice(&fac.rows[j]);
        }
    }
    if dates.len() < 2 {
        return Err(Error::Alignment(format!(
            "only {} dates shared between {returns_name} and {factors_name}",
            dates.len()
        )));
    }
    let t = dates.len();
    let raw = Array2::from_shape_vec((t, n), raw).expect("row-major returns");
    check_units(&raw, opts.units)?;
    ReturnPanel::new(
        dates,
        assets,
        raw,
        Array1::from(rf),
        Array2::from_shape_vec((t, 3), factors).expect("row-major factors"),
    )
}

/// Flags percent-formatted inputs: a median absolute return above 1.0 is
/// implausible for decimal daily returns.
fn check_units(raw: &Array2<f64>, policy: UnitsPolicy) -> Result<()> {
    let mut abs: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
    if abs.is_empty() {
        return Ok(());
    }
    abs.sort_by(f64::total_cmp);
    let median = abs[abs.len() / 2];
    if median > 1.0 {
        let msg = format!("median absolute return {median} > 1.0; inputs look percent-formatted");
        match policy {
            UnitsPolicy::Warn => log::warn!("{msg}"),
            UnitsPolicy::Error => return Err(Error::Data(msg)),
        }
    }
    Ok(())
}

pub fn load_macro(path: &Path) -> Result<MacroPanel> {
    macro_from_reader(open(path)?, &path.display().to_string())
}

/// Reads `date,<covariate...>` monthly rows. The standard header is
/// `date,tbl,dp,ep,bm,tms,dfy,ntis,svar`; other column sets are accepted.
pub fn macro_from_reader<R: Read>(reader: R, name: &str) -> Result<MacroPanel> {
    let tbl = read_dated_table(reader, name)?;
    let cols = tbl.header.len() - 1;
    let t = tbl.dates.len();
    if t == 0 {
        return Err(Error::Data(format!("{name}: no rows")));
    }
    let values = Array2::from_shape_vec((t, cols), tbl.rows.into_iter().flatten().collect())
        .expect("rectangular macro table");
    Ok(MacroPanel {
        dates: tbl.dates,
        names: tbl.header[1..].to_vec(),
        values,
    })
}

/// Forward-fills monthly covariates onto the panel's trading days: each day
/// takes the latest monthly row dated on or before it.
pub fn align_macro_daily(dates: &[NaiveDate], macro_panel: &MacroPanel) -> Result<Array2<f64>> {
    let ny = macro_panel.values.ncols();
    let mut out = Array2::zeros((dates.len(), ny));
    let mut j = 0usize;
    for (t, d) in dates.iter().enumerate() {
        if *d < macro_panel.dates[0] {
            return Err(Error::Coverage(format!(
                "panel date {d} precedes first macro date {}",
                macro_panel.dates[0]
            )));
        }
        while j + 1 < macro_panel.dates.len() && macro_panel.dates[j + 1] <= *d {
            j += 1;
        }
        out.row_mut(t).assign(&macro_panel.values.row(j));
    }
    Ok(out)
}

/// Reads per-asset covariates in long format `date,asset,<cov...>` and lays
/// them out as `T×N×Z` on the panel's dates. Missing (date, asset) pairs are
/// NaN, i.e. undefined.
pub fn load_asset_covariates(path: &Path, panel: &ReturnPanel) -> Result<(Vec<String>, Array3<f64>)> {
    asset_covariates_from_reader(open(path)?, &path.display().to_string(), panel)
}

pub fn asset_covariates_from_reader<R: Read>(
    reader: R,
    name: &str,
    panel: &ReturnPanel,
) -> Result<(Vec<String>, Array3<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            file: name.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "date" || header[1] != "asset" {
        return Err(Error::Parse {
            file: name.into(),
            line: 1,
            msg: "header must be `date,asset,<covariate...>`".into(),
        });
    }
    let z = header.len() - 2;
    let date_idx: HashMap<NaiveDate, usize> =
        panel.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let asset_idx: HashMap<&str, usize> = panel
        .assets
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    let mut out = Array3::from_elem((panel.len(), panel.n_assets(), z), f64::NAN);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            file: name.into(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let perr = |msg: String| Error::Parse {
            file: name.into(),
            line,
            msg,
        };
        if rec.len() != header.len() {
            return Err(perr(format!("expected {} fields", header.len())));
        }
        let d = parse_date(&rec[0]).map_err(perr)?;
        let Some(&ai) = asset_idx.get(&rec[1]) else {
            return Err(perr(format!("unknown asset `{}`", &rec[1])));
        };
        let Some(&ti) = date_idx.get(&d) else { continue };
        for k in 0..z {
            out[[ti, ai, k]] = parse_cell(&rec[2 + k]).map_err(|m| match m.as_str() {
                "NaN cell" => Error::Data(format!("{name} line {line}: NaN cell")),
                _ => perr(m),
            })?;
        }
    }
    Ok((header[2..].to_vec(), out))
}

/// Inclusive date interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateRange,
    pub val: DateRange,
    pub test: DateRange,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if r.start > r.end {
                return Err(Error::Split(format!("{name} interval starts after it ends")));
            }
        }
        if self.train.end >= self.val.start || self.val.end >= self.test.start {
            return Err(Error::Split(
                "intervals must be disjoint and ordered train < val < test".into(),
            ));
        }
        Ok(())
    }
}

/// Row index ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_panel(dates: &[NaiveDate], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let range_of = |r: &DateRange, name: &str| -> Result<Range<usize>> {
        let lo = dates.partition_point(|d| *d < r.start);
        let hi = dates.partition_point(|d| *d <= r.end);
        if lo >= hi {
            return Err(Error::Split(format!(
                "{name} interval {}..={} contains no panel dates",
                r.start, r.end
            )));
        }
        Ok(lo..hi)
    };
    Ok(SplitIndices {
        train: range_of(&spec.train, "train")?,
        val: range_of(&spec.val, "val")?,
        test: range_of(&spec.test, "test")?,
    })
}

/// Per-column standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Sample mean and (n−1) standard deviation per column, std floored at
    /// [`STD_FLOOR`].
    pub fn fit(columns: ArrayView2<'_, f64>) -> Result<Self> {
        let n = columns.nrows();
        if n < 2 {
            return Err(Error::Fit(format!("need at least 2 rows, got {n}")));
        }
        let mean = columns.mean_axis(Axis(0)).expect("nonempty");
        let mut std = Vec::with_capacity(columns.ncols());
        for (j, col) in columns.columns().into_iter().enumerate() {
            let ss: f64 = col.iter().map(|v| (v - mean[j]).powi(2)).sum();
            std.push((ss / (n - 1) as f64).sqrt().max(STD_FLOOR));
        }
        Ok(Self {
            mean: mean.to_vec(),
            std,
        })
    }

    /// Fits on the rows that are fully finite (used where warm-up leaves NaNs).
    pub fn fit_finite_rows(columns: ArrayView2<'_, f64>) -> Result<Self> {
        let rows: Vec<_> = columns
            .rows()
            .into_iter()
            .filter(|r| r.iter().all(|v| v.is_finite()))
            .collect();
        if rows.len() < 2 {
            return Err(Error::Fit(format!("need at least 2 defined rows, got {}", rows.len())));
        }
        let stacked = ndarray::stack(Axis(0), &rows).expect("equal row lengths");
        Self::fit(stacked.view())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::shape(format!("{} columns", self.dim()), format!("{cols} columns")));
        }
        Ok(())
    }

    pub fn apply(&self, columns: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(columns.ncols())?;
        let mut out = columns.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, columns: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(columns.ncols())?;
        let mut out = columns.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}
