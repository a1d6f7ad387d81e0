//! Flat `key = value` training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed (model init, gates, batching, augmentation) |
//! | `epochs` | 30 | training epochs |
//! | `batch_size` | 16 | images per batch, background included |
//! | `lr` | 0.0001 | Adam learning rate |
//! | `lambda` | 0.125 | fraction of background images per batch |
//! | `d_channels` | 18 | enhancer width D |
//! | `enhancer_count` | 6 | dense enhancer blocks |
//! | `block_kind` | tree | `tree` or `standard` |
//! | `leaf_assignment` | reverse | `reverse` or `forward` |
//! | `aux_levels` | low+middle+high | auxiliator taps, or `none` |
//! | `crop` | 64 | square training crop |
//! | `sigma` | 4 | density kernel width in pixels |
//! | `flip_prob` | 0.5 | per-axis flip probability |
//! | `jitter` | 0.1 | brightness and contrast jitter amplitude |
//! | `train_manifest`, `val_manifest`, `background_manifest` | unset | dataset manifests |
//! | `checkpoint` | unset | output checkpoint path |

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DEFAULT_SIGMA;
use crate::model::{AuxLevels, ModelSpec};
use crate::scale_tree::{BlockKind, EnhancerSpec, LeafAssignment};
use crate::supervision::DEFAULT_LAMBDA;
use crate::tensor::AdamConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("config key {key:?}: invalid value {value:?} ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub d_channels: usize,
    pub enhancer_count: usize,
    pub block_kind: BlockKind,
    pub leaf_assignment: LeafAssignment,
    pub aux_levels: AuxLevels,
    pub crop: usize,
    pub sigma: f64,
    pub flip_prob: f64,
    pub jitter: f64,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub background_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            lr: AdamConfig::default().lr,
            lambda: DEFAULT_LAMBDA,
            d_channels: 18,
            enhancer_count: 6,
            block_kind: BlockKind::Tree,
            leaf_assignment: LeafAssignment::Reverse,
            aux_levels: AuxLevels::ALL,
            crop: 64,
            sigma: DEFAULT_SIGMA,
            flip_prob: 0.5,
            jitter: 0.1,
            train_manifest: None,
            val_manifest: None,
            background_manifest: None,
            checkpoint: None,
        }
    }
}

pub const KEYS: [&str; 18] = [
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "lambda",
    "d_channels",
    "enhancer_count",
    "block_kind",
    "leaf_assignment",
    "aux_levels",
    "crop",
    "sigma",
    "flip_prob",
    "jitter",
    "train_manifest",
    "val_manifest",
    "background_manifest",
    "checkpoint",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl TrainConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lambda" | "r" => self.lambda = parse_value("lambda", value)?,
            "d_channels" => self.d_channels = parse_value(key, value)?,
            "enhancer_count" => self.enhancer_count = parse_value(key, value)?,
            "block_kind" => self.block_kind = parse_value(key, value)?,
            "leaf_assignment" => self.leaf_assignment = parse_value(key, value)?,
            "aux_levels" => self.aux_levels = parse_value(key, value)?,
            "crop" => self.crop = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "flip_prob" => self.flip_prob = parse_value(key, value)?,
            "jitter" => self.jitter = parse_value(key, value)?,
            "train_manifest" => self.train_manifest = Some(value.into()),
            "val_manifest" => self.val_manifest = Some(value.into()),
            "background_manifest" => self.background_manifest = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    text: raw.into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            // `r` is the other common name of the background fraction
            let key = if key == "r" { "lambda" } else { key };
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax {
                    line: idx + 1,
                    text: raw.into(),
                });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    line: idx + 1,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: idx + 1, key },
                other => other,
            })?;
            seen.push(key.into());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::InvalidValue {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "0".into(), "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string(), "must be positive");
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda", self.lambda.to_string(), "must lie in [0, 1)");
        }
        if self.block_kind == BlockKind::Tree && (self.d_channels == 0 || !self.d_channels.is_multiple_of(9)) {
            return bad("d_channels", self.d_channels.to_string(), "must be a positive multiple of 9");
        }
        if self.crop == 0 {
            return bad("crop", "0".into(), "must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", self.sigma.to_string(), "must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", self.flip_prob.to_string(), "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter", self.jitter.to_string(), "must lie in [0, 1)");
        }
        Ok(())
    }

    /// Network described by this configuration (desk backbone).
    pub fn model_spec(&self) -> crate::Result<ModelSpec> {
        let mut spec = ModelSpec::desk_default();
        spec.enhancer = EnhancerSpec::new(self.d_channels, self.leaf_assignment)
            .or_else(|e| match self.block_kind {
                // a standard block only needs D; keep the schedule for reporting
                BlockKind::Standard => Ok(EnhancerSpec {
                    d_channels: self.d_channels,
                    ..EnhancerSpec::new(9, self.leaf_assignment)?
                }),
                BlockKind::Tree => Err(e),
            })?;
        spec.enhancer_count = self.enhancer_count;
        spec.block_kind = self.block_kind;
        spec.aux_levels = self.aux_levels;
        spec.validate()?;
        Ok(spec)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Canonical text form: every key in [`KEYS`] order, unset paths omitted.
/// Floats use shortest round-trip formatting.
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {:?}", self.lr)?;
        writeln!(f, "lambda = {:?}", self.lambda)?;
        writeln!(f, "d_channels = {}", self.d_channels)?;
        writeln!(f, "enhancer_count = {}", self.enhancer_count)?;
        writeln!(f, "block_kind = {}", self.block_kind.as_str())?;
        writeln!(f, "leaf_assignment = {}", self.leaf_assignment.as_str())?;
        writeln!(f, "aux_levels = {}", self.aux_levels.label())?;
        writeln!(f, "crop = {}", self.crop)?;
        writeln!(f, "sigma = {:?}", self.sigma)?;
        writeln!(f, "flip_prob = {:?}", self.flip_prob)?;
        writeln!(f, "jitter = {:?}", self.jitter)?;
        for (key, path) in [
            ("train_manifest", &self.train_manifest),
            ("val_manifest", &self.val_manifest),
            ("background_manifest", &self.background_manifest),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = path {
                writeln!(f, "{key} = {}", p.display())?;
            }
        }
        Ok(())
    }
}
