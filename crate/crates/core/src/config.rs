//! Run configuration: a TOML file with one section per module.
//!
//! Every key is optional; an empty file gives the published defaults.
//! Unknown keys are rejected. Relative paths resolve against the directory
//! of the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{parse_date, DateRange, SplitSpec, UnitsPolicy};
use crate::diffusion::DdimPlan;
use crate::error::{Error, Result};
use crate::guidance::Intensity;
use crate::nn::{AttentionMap, DenoiserConfig};
use crate::pipeline::PrepOptions;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub returns: Option<PathBuf>,
    pub factors: Option<PathBuf>,
    #[serde(rename = "macro")]
    pub macro_path: Option<PathBuf>,
    /// Long-format `date,asset,<covariate...>` file appended to the characteristics.
    pub asset_covariates: Option<PathBuf>,
    pub use_characteristics: bool,
    pub standardize_targets: bool,
    pub zero_fill_undefined: bool,
    pub units: UnitsPolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            returns: None,
            factors: None,
            macro_path: None,
            asset_covariates: None,
            use_characteristics: true,
            standardize_targets: true,
            zero_fill_undefined: false,
            units: UnitsPolicy::Warn,
        }
    }
}

impl DataSection {
    pub fn prep_options(&self) -> PrepOptions {
        PrepOptions {
            standardize_targets: self.standardize_targets,
            zero_fill_undefined: self.zero_fill_undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: [String; 2],
    pub val: [String; 2],
    pub test: [String; 2],
}

impl Default for SplitSection {
    fn default() -> Self {
        let r = |a: &str, b: &str| [a.to_string(), b.to_string()];
        Self {
            train: r("1958-01-01", "1999-12-31"),
            val: r("2000-01-01", "2004-12-31"),
            test: r("2005-01-01", "2023-12-31"),
        }
    }
}

impl SplitSection {
    pub fn spec(&self) -> Result<SplitSpec> {
        let range = |name: &str, v: &[String; 2]| -> Result<DateRange> {
            let p = |s: &String| parse_date(s).map_err(|m| Error::config(format!("split.{name}"), m));
            Ok(DateRange::new(p(&v[0])?, p(&v[1])?))
        };
        let spec = SplitSpec {
            train: range("train", &self.train)?,
            val: range("val", &self.val)?,
            test: range("test", &self.test)?,
        };
        spec.validate()
            .map_err(|e| Error::config("split", e.to_string()))?;
        Ok(spec)
    }
}

/// Architecture settings; asset, covariate and systematic counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub window: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub step_embed_dim: usize,
    pub window_pos: bool,
    pub attention_map: AttentionMap,
    pub cross_depth: usize,
    pub self_depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            window: d.window,
            hidden: d.hidden,
            heads: d.heads,
            mlp_hidden: d.mlp_hidden,
            step_embed_dim: d.step_embed_dim,
            window_pos: d.window_pos,
            attention_map: d.attention_map,
            cross_depth: d.cross_depth,
            self_depth: d.self_depth,
        }
    }
}

impl ModelSection {
    pub fn denoiser(&self, n_assets: usize, n_sys: usize, z_dim: usize) -> Result<DenoiserConfig> {
        let cfg = DenoiserConfig {
            n_assets,
            n_sys,
            window: self.window,
            hidden: self.hidden,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            step_embed_dim: self.step_embed_dim,
            z_dim,
            window_pos: self.window_pos,
            attention_map: self.attention_map,
            cross_depth: self.cross_depth,
            self_depth: self.self_depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    /// Fixed shrinkage intensity; the analytic estimate is used when absent.
    pub delta: Option<f64>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self { delta: None }
    }
}

impl GuidanceSection {
    pub fn intensity(&self) -> Intensity {
        self.delta.map_or(Intensity::Analytic, Intensity::Fixed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub ddim_steps: usize,
    pub eta: f64,
    pub k: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            eta: 0.0,
            k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub guidance: GuidanceSection,
    pub sampling: SamplingSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            split: SplitSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            guidance: GuidanceSection::default(),
            sampling: SamplingSection::default(),
        }
    }
}

/// Maps a TOML deserialization error to a named-field configuration error.
fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    // serde reports unknown keys and type errors with the offending key in backticks
    let field = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field"))
        .map(str::to_string)
        .unwrap_or_else(|| "config".to_string());
    Error::config(field, msg)
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.returns,
            &mut self.data.factors,
            &mut self.data.macro_path,
            &mut self.data.asset_covariates,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.spec()?;
        self.model.denoiser(1, 0, 0)?;
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.validate()?;
        if let Some(d) = self.guidance.delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::config("guidance.delta", format!("{d} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.sampling.eta) {
            return Err(Error::config("sampling.eta", format!("{} outside [0, 1]", self.sampling.eta)));
        }
        if self.sampling.k == 0 {
            return Err(Error::config("sampling.k", "must be positive"));
        }
        if self.sampling.ddim_steps == 0 {
            return Err(Error::config("sampling.ddim_steps", "must be positive"));
        }
        for (name, p) in [
            ("data.returns", &self.data.returns),
            ("data.factors", &self.data.factors),
            ("data.macro", &self.data.macro_path),
            ("data.asset_covariates", &self.data.asset_covariates),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::config(name, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn ddim_plan(&self) -> Result<DdimPlan> {
        DdimPlan::evenly_spaced(self.train.diffusion_steps, self.sampling.ddim_steps, self.sampling.eta)
    }

    pub fn require<'a>(&self, field: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::config(field, "required for this command"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
