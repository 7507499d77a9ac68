//! Forecast ensembles and their on-disk formats.
//!
//! CSV layout (version 1):
//!
//! ```text
//! format,diffport-ensemble,version,1
//! assets,<asset_1>,...,<asset_N>
//! record,<date>,<K>,<N>
//! <K lines of N comma-separated returns>
//! record,...
//! ```
//!
//! Binary layout (version 1, little endian): magic `DPENSBIN`, `u32`
//! version, `u32` asset count, each asset name as `u32` byte length plus
//! UTF-8 bytes, `u64` record count, then per record an `i32` day number
//! (days since 0001-01-01, day 1), `u32` K, `u32` N and `K·N` `f64` values
//! row-major.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::Array2;

use crate::data::parse_date;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DPENSBIN";

/// `K` sampled next-day excess-return vectors for one target date.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    pub date: NaiveDate,
    /// `K×N`.
    pub samples: Array2<f64>,
}

impl ForecastEnsemble {
    pub fn new(date: NaiveDate, samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Data(format!("{date}: empty ensemble")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{date}: non-finite ensemble entry")));
        }
        Ok(Self { date, samples })
    }

    pub fn k(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n(&self) -> usize {
        self.samples.ncols()
    }

    /// Mean across samples (length `N`).
    pub fn mean(&self) -> Vec<f64> {
        self.samples
            .mean_axis(ndarray::Axis(0))
            .expect("nonempty ensemble")
            .to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSet {
    pub assets: Vec<String>,
    pub records: Vec<ForecastEnsemble>,
}

impl EnsembleSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.assets.len();
        for r in &self.records {
            if r.n() != n {
                return Err(Error::shape(n, r.n()));
            }
        }
        if self.records.windows(2).any(|w| w[1].date <= w[0].date) {
            return Err(Error::Data("ensemble dates must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "format,diffport-ensemble,version,{FORMAT_VERSION}").map_err(io)?;
        writeln!(w, "assets,{}", self.assets.join(",")).map_err(io)?;
        for r in &self.records {
            writeln!(w, "record,{},{},{}", r.date, r.k(), r.n()).map_err(io)?;
            for row in r.samples.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", cells.join(",")).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_csv<R: Read>(r: R, name: &str) -> Result<Self> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::Parse {
                    file: name.into(),
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(Error::Parse {
                    file: name.into(),
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let perr = |line: usize, msg: String| Error::Parse {
            file: name.into(),
            line,
            msg,
        };
        let (ln, head) = next("format header")?;
        let parts: Vec<&str> = head.trim().split(',').collect();
        if parts.len() != 4 || parts[0] != "format" || parts[1] != "diffport-ensemble" || parts[2] != "version" {
            return Err(perr(ln, "missing ensemble format header".into()));
        }
        if parts[3] != FORMAT_VERSION.to_string() {
            return Err(perr(ln, format!("unsupported version {}", parts[3])));
        }
        let (ln, assets_line) = next("asset header")?;
        let mut it = assets_line.trim().split(',');
        if it.next() != Some("assets") {
            return Err(perr(ln, "missing assets header".into()));
        }
        let assets: Vec<String> = it.map(str::to_string).collect();
        let mut records = Vec::new();
        loop {
            let (ln, line) = match next("record") {
                Ok(v) => v,
                Err(Error::Parse { line: 0, .. }) => break,
                Err(e) => return Err(e),
            };
            if line.trim().is_empty() {
                continue;
            }
            let p: Vec<&str> = line.trim().split(',').collect();
            if p.len() != 4 || p[0] != "record" {
                return Err(perr(ln, "expected `record,<date>,<K>,<N>`".into()));
            }
            let date = parse_date(p[1]).map_err(|m| perr(ln, m))?;
            let k: usize = p[2].parse().map_err(|_| perr(ln, format!("bad K `{}`", p[2])))?;
            let n: usize = p[3].parse().map_err(|_| perr(ln, format!("bad N `{}`", p[3])))?;
            let mut samples = Array2::zeros((k, n));
            for i in 0..k {
                let (ln, row) = next("sample row")?;
                let cells: Vec<&str> = row.trim().split(',').collect();
                if cells.len() != n {
                    return Err(perr(ln, format!("expected {n} values, got {}", cells.len())));
                }
                for (j, c) in cells.iter().enumerate() {
                    samples[[i, j]] = c.parse().map_err(|_| perr(ln, format!("bad number `{c}`")))?;
                }
            }
            records.push(ForecastEnsemble::new(date, samples)?);
        }
        let set = Self { assets, records };
        set.validate()?;
        Ok(set)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let io = |e: std::io::Error| Error::Format(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.assets.len() as u32).to_le_bytes()).map_err(io)?;
        for a in &self.assets {
            w.write_all(&(a.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(a.as_bytes()).map_err(io)?;
        }
        w.write_all(&(self.records.len() as u64).to_le_bytes()).map_err(io)?;
        for r in &self.records {
            w.write_all(&r.date.num_days_from_ce().to_le_bytes()).map_err(io)?;
            w.write_all(&(r.k() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(r.n() as u32).to_le_bytes()).map_err(io)?;
            for v in r.samples.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("ensemble binary: {m}"));
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| fmt("truncated file"))?;
            Ok(buf)
        };
        if take(8)? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_of(take(4)?);
        if version != FORMAT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let n_assets = u32_of(take(4)?) as usize;
        let mut assets = Vec::with_capacity(n_assets);
        for _ in 0..n_assets {
            let len = u32_of(take(4)?) as usize;
            assets.push(String::from_utf8(take(len)?).map_err(|_| fmt("asset name is not UTF-8"))?);
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let day = i32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            let date = NaiveDate::from_num_days_from_ce_opt(day).ok_or_else(|| fmt("bad date"))?;
            let k = u32_of(take(4)?) as usize;
            let n = u32_of(take(4)?) as usize;
            let raw = take(k * n * 8)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let samples = Array2::from_shape_vec((k, n), vals).map_err(|e| fmt(&e.to_string()))?;
            records.push(ForecastEnsemble::new(date, samples)?);
        }
        let set = Self { assets, records };
        set.validate()?;
        Ok(set)
    }

    /// Writes CSV or binary depending on the extension (`.bin` is binary).
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let w = std::io::BufWriter::new(f);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(w)
        } else {
            self.write_csv(w)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let r = BufReader::new(f);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(r)
        } else {
            Self::read_csv(r, &path.display().to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set() -> EnsembleSet {
        let d = |s| parse_date(s).unwrap();
        EnsembleSet {
            assets: vec!["a".into(), "b".into()],
            records: vec![
                ForecastEnsemble::new(d("2020-01-02"), array![[0.1, -0.2], [1e-17, 3.5]]).unwrap(),
                ForecastEnsemble::new(d("2020-01-03"), array![[0.25, 0.0]]).unwrap(),
            ],
        }
    }

    #[test]
    fn csv_and_binary_read_back() {
        let s = set();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(EnsembleSet::read_csv(buf.as_slice(), "mem").unwrap(), s);
        let mut bin = Vec::new();
        s.write_binary(&mut bin).unwrap();
        assert_eq!(EnsembleSet::read_binary(bin.as_slice()).unwrap(), s);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let text = "format,diffport-ensemble,version,2\nassets,a\n";
        assert!(EnsembleSet::read_csv(text.as_bytes(), "x").is_err());
        let text = "format,diffport-ensemble,version,1\nassets,a\nrecord,2020-01-01,2,1\n0.1\n";
        assert!(matches!(
            EnsembleSet::read_csv(text.as_bytes(), "x"),
            Err(Error::Parse { .. })
        ));
        assert!(EnsembleSet::read_binary(&b"NOTMAGIC"[..]).is_err());
    }
}
