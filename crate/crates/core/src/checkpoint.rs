//! Versioned checkpoint container.
//!
//! Layout (little endian):
//!
//! | field            | encoding                                   |
//! |------------------|--------------------------------------------|
//! | magic            | 8 bytes `DPCKPT\0\0`                        |
//! | version          | `u32` (currently 1)                        |
//! | header length    | `u64` byte count of the JSON header        |
//! | header           | UTF-8 JSON, see [`Header`]                 |
//! | parameters       | `f64` values of every tensor in header order |
//! | optimizer (opt.) | first moments, then second moments, `f64`  |
//!
//! Tensors are stored row-major in the order listed in the header, which is
//! the declared parameter order of the denoiser.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenoiserConfig, DenoiserParams};
use crate::pipeline::Normalizers;
use crate::train::AdamW;

pub const MAGIC: &[u8; 8] = b"DPCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub step: usize,
    pub assets: Vec<String>,
    pub normalizers: Normalizers,
    /// Training-range excess-return covariance (row-major `N×N`).
    pub train_cov: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
    /// Adam step counter when optimizer moments follow the parameters.
    pub optimizer_t: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleSpec,
    pub step: usize,
    pub assets: Vec<String>,
    pub normalizers: Normalizers,
    pub train_cov: Array2<f64>,
    pub optimizer: Option<AdamW>,
}

fn put_f64s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated tensor data".into()))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.params.config.n_assets;
        if self.train_cov.dim() != (n, n) {
            return Err(Error::shape(format!("{n}x{n}"), format!("{:?}", self.train_cov.dim())));
        }
        let header = Header {
            config: self.params.config.clone(),
            schedule: self.schedule.clone(),
            step: self.step,
            assets: self.assets.clone(),
            normalizers: self.normalizers.clone(),
            train_cov: self.train_cov.iter().copied().collect(),
            tensors: self
                .params
                .tensor_names()
                .into_iter()
                .zip(self.params.shapes())
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for s in self.params.slices() {
            put_f64s(&mut w, s).map_err(io)?;
        }
        if let Some(opt) = &self.optimizer {
            put_f64s(&mut w, &opt.m).map_err(io)?;
            put_f64s(&mut w, &opt.v).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        header.config.validate()?;
        let mut params = DenoiserParams::init(&header.config, 0)?;
        let expected: Vec<TensorEntry> = params
            .tensor_names()
            .into_iter()
            .zip(params.shapes())
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the model configuration"));
        }
        for s in params.slices_mut() {
            let vals = get_f64s(&mut r, s.len())?;
            s.copy_from_slice(&vals);
        }
        let optimizer = match header.optimizer_t {
            Some(t) => {
                let size = params.param_count();
                let m = get_f64s(&mut r, size)?;
                let v = get_f64s(&mut r, size)?;
                Some(AdamW { m, v, t })
            }
            None => None,
        };
        let n = header.config.n_assets;
        let train_cov = Array2::from_shape_vec((n, n), header.train_cov)
            .map_err(|_| bad("training covariance has the wrong size"))?;
        Ok(Self {
            params,
            schedule: header.schedule,
            step: header.step,
            assets: header.assets,
            normalizers: header.normalizers,
            train_cov,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("ckpt.tmp");
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write(std::io::BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Normalizer;

    pub(crate) fn sample_checkpoint(with_opt: bool) -> Checkpoint {
        let cfg = DenoiserConfig {
            n_assets: 2,
            n_sys: 1,
            window: 3,
            hidden: 4,
            heads: 2,
            mlp_hidden: 6,
            step_embed_dim: 2,
            z_dim: 1,
            ..Default::default()
        };
        let params = DenoiserParams::init(&cfg, 4).unwrap();
        let size = params.param_count();
        let norm = |d: usize| Normalizer {
            mean: vec![0.5; d],
            std: vec![2.0; d],
        };
        Checkpoint {
            params,
            schedule: ScheduleSpec {
                steps: 10,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            step: 7,
            assets: vec!["x".into(), "y".into()],
            normalizers: Normalizers {
                target: norm(2),
                asset: norm(1),
                sys: norm(1),
            },
            train_cov: ndarray::array![[1.0, 0.2], [0.2, 3.0]],
            optimizer: with_opt.then(|| AdamW {
                m: (0..size).map(|i| i as f64 * 1e-3).collect(),
                v: vec![0.25; size],
                t: 7,
            }),
        }
    }

    #[test]
    fn write_then_read_is_identity() {
        for opt in [false, true] {
            let c = sample_checkpoint(opt);
            let mut buf = Vec::new();
            c.write(&mut buf).unwrap();
            assert_eq!(Checkpoint::read(buf.as_slice()).unwrap(), c);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = sample_checkpoint(false);
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read(short), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut v2 = buf;
        v2[8] = 2;
        assert!(matches!(Checkpoint::read(v2.as_slice()), Err(Error::Checkpoint(_))));
    }
}
