//! Run configuration file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dfu_core::diffusion::DiffusionSchedule;
use dfu_core::eval::FeatureExtractor;
use dfu_core::grid::{SyntheticKind, SyntheticKindName, SyntheticSpec};
use dfu_core::model::ModelSpec;
use dfu_core::trainer::{FinetuneConfig, ResolutionMixture, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and, unless `train.seed` differs, nothing else.
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub mixture: MixtureConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneSection,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::desk(),
            data: DataConfig::default(),
            mixture: MixtureConfig::default(),
            train: TrainConfig::desk(),
            finetune: FinetuneSection::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Where training functions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic family; ignored when `images` is set.
    pub kind: SyntheticKindName,
    /// Family parameters; missing ones take the family defaults.
    pub alpha: Option<f64>,
    pub cutoff: Option<usize>,
    pub sharpness: Option<f64>,
    pub smooth_cutoff: Option<usize>,
    pub smooth_std: Option<f64>,
    pub channels: usize,
    /// Directory of square PNG files.
    pub images: Option<PathBuf>,
    pub resolutions: Vec<usize>,
    /// Number of pyramids built by `prepare-data`.
    pub count: usize,
    /// Dataset file to train from instead of fresh synthetic draws.
    pub cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: SyntheticKindName::GaussianProcess,
            alpha: None,
            cutoff: None,
            sharpness: None,
            smooth_cutoff: None,
            smooth_std: None,
            channels: 1,
            images: None,
            resolutions: vec![16, 24, 32],
            count: 256,
            cache: None,
        }
    }
}

impl DataConfig {
    /// Fills unset family parameters with defaults so the resolved file is explicit.
    fn expand(&mut self) {
        match SyntheticKind::default_for(self.kind) {
            SyntheticKind::BandLimitedFourier { cutoff } => {
                self.cutoff.get_or_insert(cutoff);
            }
            SyntheticKind::GaussianProcess { alpha, cutoff } => {
                self.alpha.get_or_insert(alpha);
                self.cutoff.get_or_insert(cutoff);
            }
            SyntheticKind::EdgePlusSmooth {
                sharpness,
                smooth_cutoff,
                smooth_std,
            } => {
                self.sharpness.get_or_insert(sharpness);
                self.smooth_cutoff.get_or_insert(smooth_cutoff);
                self.smooth_std.get_or_insert(smooth_std);
            }
        }
    }

    fn check_keys(&self) -> Result<()> {
        let set = [
            ("alpha", self.alpha.is_some()),
            ("cutoff", self.cutoff.is_some()),
            ("sharpness", self.sharpness.is_some()),
            ("smooth_cutoff", self.smooth_cutoff.is_some()),
            ("smooth_std", self.smooth_std.is_some()),
        ];
        let allowed: &[&str] = match self.kind {
            SyntheticKindName::BandLimitedFourier => &["cutoff"],
            SyntheticKindName::GaussianProcess => &["alpha", "cutoff"],
            SyntheticKindName::EdgePlusSmooth => &["sharpness", "smooth_cutoff", "smooth_std"],
        };
        if let Some((k, _)) = set.iter().find(|(k, on)| *on && !allowed.contains(k)) {
            bail!("data.{k}: not a parameter of kind `{}`", self.kind);
        }
        Ok(())
    }

    pub fn synthetic(&self, seed: u64) -> SyntheticSpec {
        let kind = match self.kind {
            SyntheticKindName::BandLimitedFourier => SyntheticKind::BandLimitedFourier {
                cutoff: self.cutoff.unwrap_or(3),
            },
            SyntheticKindName::GaussianProcess => SyntheticKind::GaussianProcess {
                alpha: self.alpha.unwrap_or(2.0),
                cutoff: self.cutoff.unwrap_or(7),
            },
            SyntheticKindName::EdgePlusSmooth => SyntheticKind::EdgePlusSmooth {
                sharpness: self.sharpness.unwrap_or(0.01),
                smooth_cutoff: self.smooth_cutoff.unwrap_or(3),
                smooth_std: self.smooth_std.unwrap_or(0.2),
            },
        };
        SyntheticSpec::new(kind, self.channels, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MixtureConfig {
    /// Even weights over `data.resolutions`.
    Uniform,
    /// `top` and `second` on the two finest resolutions, the rest decaying by `ratio`.
    Weighted { top: f64, second: f64, ratio: f64 },
    /// Explicit weights keyed by resolution.
    Explicit { weights: BTreeMap<String, f64> },
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self::Uniform
    }
}

impl MixtureConfig {
    pub fn build(&self, resolutions: &[usize]) -> Result<ResolutionMixture> {
        Ok(match self {
            Self::Uniform => ResolutionMixture::uniform(resolutions)?,
            Self::Weighted { top, second, ratio } => ResolutionMixture::weighted(resolutions, *top, *second, *ratio)?,
            Self::Explicit { weights } => {
                let mut w = BTreeMap::new();
                for (k, v) in weights {
                    let r: usize = k.parse().with_context(|| format!("mixture.weights.{k}: not a resolution"))?;
                    w.insert(r, *v);
                }
                ResolutionMixture::new(w)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub target_resolution: usize,
    pub target_weight: f64,
    /// Levels whose spatial kernels stay trainable; defaults to the bottom level.
    pub except_levels: Option<BTreeSet<usize>>,
    pub batch_conditional: bool,
    /// Overrides for the fine-tuning run; unset keys take `train` values.
    pub steps: Option<u64>,
    pub lr: Option<f64>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            target_resolution: 48,
            target_weight: 0.2,
            except_levels: None,
            batch_conditional: true,
            steps: None,
            lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub resolutions: Vec<usize>,
    pub count: usize,
    pub cols: usize,
    /// Sample with the averaged weights.
    pub ema: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 18,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            resolutions: vec![32, 48],
            count: 16,
            cols: 4,
            ema: true,
        }
    }
}

impl SampleConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        Ok(DiffusionSchedule::new(self.steps, self.sigma_min, self.sigma_max, self.rho)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub resolutions: Vec<usize>,
    /// Samples per resolution for proxy-FID and spectra.
    pub count: usize,
    /// Probes per noise level for score error.
    pub probes: usize,
    pub extractor: FeatureExtractor,
    /// Upper end of the training band for the coherence/fidelity split.
    pub train_max: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![16, 32, 48],
            count: 64,
            probes: 8,
            extractor: FeatureExtractor::FixedRandomConv { seed: 0 },
            train_max: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML, reporting the key path of the first offending entry.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).context("config is not valid TOML")?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("invalid config at `{path}`: {}", e.into_inner().message())
        })?;
        cfg.data.check_keys()?;
        cfg.data.expand();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => {
                let mut cfg = Self::default();
                cfg.data.expand();
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        self.mixture.build(&self.data.resolutions).context("mixture")?;
        self.sample.schedule().context("sample")?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            target_resolution: f.target_resolution,
            target_weight: f.target_weight,
            base_resolutions: self.data.resolutions.clone(),
            except_levels: f.except_levels.clone().unwrap_or_else(|| BTreeSet::from([self.model.levels - 1])),
            batch_conditional: f.batch_conditional,
            train: TrainConfig {
                steps: f.steps.unwrap_or(self.train.steps),
                lr: f.lr.unwrap_or(self.train.lr),
                ..self.train.clone()
            },
        }
    }
}
