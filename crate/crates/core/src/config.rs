//! Flat `key = value` run configuration.
//!
//! A run config resolves every model/training/data knob explicitly before
//! a run starts; the snapshot written into a run directory always lists
//! all keys, and its content fingerprint is stable under key reordering.
//! Unknown keys are a hard error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::augment::AugmentationSpec;
use crate::error::{Error, Result};
use crate::models::{Arch, InitScheme, ModelConfig};
use crate::optim::OptimizerKind;
use crate::roi::ContextStrategy;
use crate::train::TrainConfig;

/// Fully resolved run configuration: model, optimizer, context and
/// augmentation settings plus data paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub init: InitScheme,
    pub num_classes: usize,
    pub input_side: usize,
    pub input_channels: usize,
    pub dropout_rate: f64,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mirror_at_train: bool,
    /// `true` applies the architecture's multiplier preset (invalid for
    /// the baseline), `false` trains uniformly.
    pub lr_multipliers: bool,
    pub context_strategy: String, // "small" | "large"
    pub context_pad: u32,
    pub context_scale: f64,
    pub aug_rotations: usize,
    pub aug_crops: usize,
    pub aug_crop_min: f64,
    pub aug_crop_max: f64,
    pub aug_seed: u64,
    pub manifest: Option<PathBuf>,
    pub pretrained_archive: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Baseline,
            init: InitScheme::XavierScratch,
            num_classes: 2,
            input_side: 224,
            input_channels: 3,
            dropout_rate: 0.0,
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-3,
            batch_size: 64,
            max_epochs: 35,
            seed: 0,
            mirror_at_train: true,
            lr_multipliers: false,
            context_strategy: "large".into(),
            context_pad: 50,
            context_scale: 2.0,
            aug_rotations: 5,
            aug_crops: 5,
            aug_crop_min: 0.8,
            aug_crop_max: 1.0,
            aug_seed: 0,
            manifest: None,
            pretrained_archive: None,
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Every key must be
    /// known.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))
        }
        match key {
            "arch" => self.arch = value.parse()?,
            "init" => self.init = value.parse()?,
            "num_classes" => self.num_classes = num(key, value)?,
            "input_side" => self.input_side = num(key, value)?,
            "input_channels" => self.input_channels = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "base_lr" => self.base_lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mirror_at_train" => self.mirror_at_train = parse_bool(key, value)?,
            "lr_multipliers" => self.lr_multipliers = parse_bool(key, value)?,
            "context_strategy" => match value {
                "small" | "large" => self.context_strategy = value.into(),
                other => {
                    return Err(Error::Config(format!(
                        "context_strategy must be small or large, got {other:?}"
                    )))
                }
            },
            "context_pad" => self.context_pad = num(key, value)?,
            "context_scale" => self.context_scale = num(key, value)?,
            "aug_rotations" => self.aug_rotations = num(key, value)?,
            "aug_crops" => self.aug_crops = num(key, value)?,
            "aug_crop_min" => self.aug_crop_min = num(key, value)?,
            "aug_crop_max" => self.aug_crop_max = num(key, value)?,
            "aug_seed" => self.aug_seed = num(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "pretrained_archive" => self.pretrained_archive = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_multipliers && self.arch == Arch::Baseline {
            return Err(Error::Config(
                "the baseline has no multiplier preset; set lr_multipliers = false".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            num_classes: self.num_classes,
            dropout_rate: self.dropout_rate,
            init: self.init,
            input_side: self.input_side,
            input_channels: self.input_channels,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let multipliers = if self.lr_multipliers {
            Some(crate::models::multiplier_scheme(self.arch)?)
        } else {
            None
        };
        Ok(TrainConfig {
            optimizer: self.optimizer,
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            dropout_rate: self.dropout_rate,
            max_epochs: self.max_epochs,
            seed: self.seed,
            mirror_at_train: self.mirror_at_train,
            multipliers,
        })
    }

    pub fn context_strategy(&self) -> ContextStrategy {
        match self.context_strategy.as_str() {
            "small" => ContextStrategy::SmallFixed {
                pad_pixels: self.context_pad,
            },
            _ => ContextStrategy::LargeProportional {
                scale: self.context_scale,
            },
        }
    }

    pub fn augmentation_spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            n_rotations: self.aug_rotations,
            n_crops_per_rotation: self.aug_crops,
            rotation_range_degrees: (0.0, 360.0),
            crop_fraction_range: (self.aug_crop_min, self.aug_crop_max),
            seed: self.aug_seed,
        }
    }

    /// Every key, explicitly, one per line.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("arch".into(), self.arch.to_string());
        m.insert("init".into(), self.init.to_string());
        m.insert("num_classes".into(), self.num_classes.to_string());
        m.insert("input_side".into(), self.input_side.to_string());
        m.insert("input_channels".into(), self.input_channels.to_string());
        m.insert("dropout_rate".into(), format!("{}", self.dropout_rate));
        m.insert("optimizer".into(), self.optimizer.to_string());
        m.insert("base_lr".into(), format!("{}", self.base_lr));
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("max_epochs".into(), self.max_epochs.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("mirror_at_train".into(), self.mirror_at_train.to_string());
        m.insert("lr_multipliers".into(), self.lr_multipliers.to_string());
        m.insert("context_strategy".into(), self.context_strategy.clone());
        m.insert("context_pad".into(), self.context_pad.to_string());
        m.insert("context_scale".into(), format!("{}", self.context_scale));
        m.insert("aug_rotations".into(), self.aug_rotations.to_string());
        m.insert("aug_crops".into(), self.aug_crops.to_string());
        m.insert("aug_crop_min".into(), format!("{}", self.aug_crop_min));
        m.insert("aug_crop_max".into(), format!("{}", self.aug_crop_max));
        m.insert("aug_seed".into(), self.aug_seed.to_string());
        if let Some(p) = &self.manifest {
            m.insert("manifest".into(), p.display().to_string());
        }
        if let Some(p) = &self.pretrained_archive {
            m.insert("pretrained_archive".into(), p.display().to_string());
        }
        m
    }

    /// Canonical snapshot text (sorted keys), suitable for re-parsing.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Content hash of the resolved configuration; independent of the key
    /// order in the source file.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.snapshot().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "bad value for {key}: expected true/false, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_snapshots_all_fields() {
        let text = "\
# a desk-scale run
arch = baseline
input_side = 32
optimizer = adam
base_lr = 0.001
batch_size = 16
max_epochs = 3
seed = 9
context_strategy = small
context_pad = 4
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.arch, Arch::Baseline);
        assert_eq!(cfg.input_side, 32);
        assert_eq!(cfg.context_pad, 4);
        let snap = cfg.snapshot();
        let back = RunConfig::parse(&snap).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = RunConfig::parse("arch = baseline\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn fingerprint_is_stable_under_reordering() {
        let a = RunConfig::parse("arch = baseline\nseed = 5\ninput_side = 32\n").unwrap();
        let b = RunConfig::parse("input_side = 32\n# comment\nseed = 5\narch = baseline\n").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig::parse("arch = baseline\nseed = 6\ninput_side = 32\n").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn multipliers_require_an_adaptable_arch() {
        let err = RunConfig::parse("arch = baseline\nlr_multipliers = true\n").unwrap_err();
        assert!(err.to_string().contains("multiplier"), "{err}");
        let cfg =
            RunConfig::parse("arch = googlenet\ndropout_rate = 0.2\nlr_multipliers = true\n")
                .unwrap();
        let tc = cfg.train_config().unwrap();
        assert!(tc.multipliers.is_some());
    }
}
