//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::autograd::{AdamConfig, Precision};
use crate::data::DatasetSpec;
use crate::eval::ExtractorTag;
use crate::latent::PairVariant;
use crate::lfm::LfmConfig;
use crate::nets::LfmMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value {value:?} for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arch {
    /// MLP for point data, DCGAN for images.
    #[default]
    Auto,
    Dcgan,
    Mlp,
}

impl Arch {
    fn name(self) -> &'static str {
        match self {
            Arch::Auto => "auto",
            Arch::Dcgan => "dcgan",
            Arch::Mlp => "mlp",
        }
    }
}

/// Which discriminator parameters the regularizer's gradient may reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DScope {
    #[default]
    Full,
    /// The `F` layer only.
    FOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub subset_n: Option<usize>,
    pub image_size: usize,
    pub arch: Arch,
    pub z_dim: usize,
    /// Width of the MLP hidden layers.
    pub hidden: usize,
    /// DCGAN channel multiplier.
    pub base_channels: usize,
    pub feature_dim: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub adam: AdamConfig,
    pub lambda_d: f64,
    pub lambda_g: f64,
    pub c_max: f64,
    pub lfm_mode: LfmMode,
    pub pair_variant: PairVariant,
    pub lfm_d_scope: DScope,
    pub saturating_g: bool,
    /// Evaluate every this many iterations; 0 disables evaluation.
    pub eval_every: u64,
    pub eval_n: usize,
    /// Keep generator batch norm in batch-statistics mode for eval samples.
    pub eval_bn_train: bool,
    /// `None` picks identity for points and a random CNN for images.
    pub extractor: Option<ExtractorTag>,
    /// Reference points drawn for synthetic datasets.
    pub ref_n: usize,
    pub ref_stats: Option<PathBuf>,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Record wall-clock milliseconds; when off the column is 0 and the
    /// metrics file is byte-reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSpec::Ring(Default::default()),
            subset_n: None,
            image_size: 64,
            arch: Arch::Auto,
            z_dim: 100,
            hidden: 128,
            base_channels: 64,
            feature_dim: 100,
            batch_size: 128,
            iterations: 1000,
            adam: AdamConfig::default(),
            lambda_d: 1.0,
            lambda_g: 1.0,
            c_max: 100.0,
            lfm_mode: LfmMode::Full,
            pair_variant: PairVariant::Abs,
            lfm_d_scope: DScope::Full,
            saturating_g: false,
            eval_every: 100,
            eval_n: 128,
            eval_bn_train: true,
            extractor: None,
            ref_n: 10_000,
            ref_stats: None,
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 0,
            precision: Precision::F64,
            wall_clock: true,
        }
    }
}

/// Every recognised key, in the order [`TrainConfig::to_text`] writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "subset_n",
    "image_size",
    "arch",
    "z_dim",
    "hidden",
    "base_channels",
    "feature_dim",
    "batch_size",
    "iterations",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda_d",
    "lambda_g",
    "c_max",
    "lfm_mode",
    "pair_variant",
    "lfm_d_scope",
    "saturating_g",
    "eval_every",
    "eval_n",
    "eval_bn_train",
    "extractor",
    "ref_n",
    "ref_stats",
    "seed",
    "checkpoint_dir",
    "checkpoint_every",
    "precision",
    "wall_clock",
];

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl TrainConfig {
    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue { key: key.to_string(), value: value.to_string(), reason: reason.to_string() };
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn(&str) -> ConfigError) -> Result<T, ConfigError> {
            v.parse().map_err(|_| bad("not a number"))
        }
        fn flag(v: &str, bad: impl Fn(&str) -> ConfigError) -> Result<bool, ConfigError> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(bad("expected true or false")),
            }
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "dataset" => self.dataset = DatasetSpec::parse(value).map_err(|e| bad(&e.to_string()))?,
            "subset_n" => {
                self.subset_n = match value {
                    "" | "all" => None,
                    v => Some(num(v, bad)?),
                }
            }
            "image_size" => self.image_size = num(value, bad)?,
            "arch" => {
                self.arch = match value {
                    "auto" => Arch::Auto,
                    "dcgan" => Arch::Dcgan,
                    "mlp" => Arch::Mlp,
                    _ => return Err(bad("expected auto, dcgan or mlp")),
                }
            }
            "z_dim" => self.z_dim = num(value, bad)?,
            "hidden" => self.hidden = num(value, bad)?,
            "base_channels" => self.base_channels = num(value, bad)?,
            "feature_dim" => self.feature_dim = num(value, bad)?,
            "batch_size" => self.batch_size = num(value, bad)?,
            "iterations" => self.iterations = num(value, bad)?,
            "lr" => self.adam.lr = num(value, bad)?,
            "beta1" => self.adam.beta1 = num(value, bad)?,
            "beta2" => self.adam.beta2 = num(value, bad)?,
            "adam_eps" => self.adam.eps = num(value, bad)?,
            "lambda_d" => self.lambda_d = num(value, bad)?,
            "lambda_g" => self.lambda_g = num(value, bad)?,
            "c_max" => self.c_max = num(value, bad)?,
            "lfm_mode" => self.lfm_mode = LfmMode::parse(value).ok_or_else(|| bad("expected full, g_only or off"))?,
            "pair_variant" => self.pair_variant = PairVariant::parse(value).ok_or_else(|| bad("expected abs or no_abs"))?,
            "lfm_d_scope" => {
                self.lfm_d_scope = match value {
                    "full" => DScope::Full,
                    "f_only" => DScope::FOnly,
                    _ => return Err(bad("expected full or f_only")),
                }
            }
            "saturating_g" => self.saturating_g = flag(value, bad)?,
            "eval_every" => self.eval_every = num(value, bad)?,
            "eval_n" => self.eval_n = num(value, bad)?,
            "eval_bn_train" => self.eval_bn_train = flag(value, bad)?,
            "extractor" => {
                self.extractor = match value {
                    "" | "auto" => None,
                    v => Some(ExtractorTag::parse(v).ok_or_else(|| bad("expected auto, identity or random_cnn[:SEED]"))?),
                }
            }
            "ref_n" => self.ref_n = num(value, bad)?,
            "ref_stats" => self.ref_stats = path(value),
            "seed" => self.seed = num(value, bad)?,
            "checkpoint_dir" => self.checkpoint_dir = path(value),
            "checkpoint_every" => self.checkpoint_every = num(value, bad)?,
            "precision" => self.precision = Precision::parse(value).ok_or_else(|| bad("expected f32 or f64"))?,
            "wall_clock" => self.wall_clock = flag(value, bad)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "dataset" => self.dataset.to_string(),
            "subset_n" => self.subset_n.map_or_else(|| "all".to_string(), |n| n.to_string()),
            "image_size" => self.image_size.to_string(),
            "arch" => self.arch.name().to_string(),
            "z_dim" => self.z_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "iterations" => self.iterations.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "lambda_d" => self.lambda_d.to_string(),
            "lambda_g" => self.lambda_g.to_string(),
            "c_max" => self.c_max.to_string(),
            "lfm_mode" => self.lfm_mode.name().to_string(),
            "pair_variant" => self.pair_variant.name().to_string(),
            "lfm_d_scope" => match self.lfm_d_scope {
                DScope::Full => "full".to_string(),
                DScope::FOnly => "f_only".to_string(),
            },
            "saturating_g" => self.saturating_g.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_n" => self.eval_n.to_string(),
            "eval_bn_train" => self.eval_bn_train.to_string(),
            "extractor" => self.extractor.as_ref().map_or_else(|| "auto".to_string(), ToString::to_string),
            "ref_n" => self.ref_n.to_string(),
            "ref_stats" => self.ref_stats.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "seed" => self.seed.to_string(),
            "checkpoint_dir" => opt_str(&self.checkpoint_dir.as_ref().map(|p| p.display())),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "precision" => self.precision.name().to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Canonical text listing every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// The architecture after resolving [`Arch::Auto`] against the dataset.
    pub fn resolved_arch(&self) -> Arch {
        match (self.arch, &self.dataset) {
            (Arch::Auto, DatasetSpec::Ring(_)) => Arch::Mlp,
            (Arch::Auto, _) => Arch::Dcgan,
            (a, _) => a,
        }
    }

    pub fn lfm_config(&self) -> LfmConfig {
        LfmConfig {
            lambda_d: self.lambda_d,
            lambda_g: self.lambda_g,
            c_max: self.c_max,
            feature_dim: self.feature_dim,
            mode: self.lfm_mode,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.lfm_mode != LfmMode::Off && self.batch_size % 2 != 0 {
            return err(format!("batch_size {} must be even when lfm_mode is {}", self.batch_size, self.lfm_mode.name()));
        }
        if self.lfm_mode != LfmMode::Off && self.z_dim < 2 {
            return err("orthogonal pairs need z_dim >= 2".into());
        }
        if self.z_dim == 0 || self.feature_dim == 0 || self.hidden == 0 || self.base_channels == 0 {
            return err("network widths must be positive".into());
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.adam;
        if !(lr >= 0.0 && eps > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
            return err(format!("optimizer settings out of range: {:?}", self.adam));
        }
        self.lfm_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval_every > 0 && self.eval_n < 2 {
            return err("eval_n must be at least 2".into());
        }
        if matches!(self.extractor, Some(ExtractorTag::TrainedDf { .. })) {
            return err("trained_df features are only available to the fid command".into());
        }
        if self.resolved_arch() == Arch::Dcgan && ![16, 32, 64].contains(&self.image_size) {
            return err(format!("image_size {} unsupported; expected 16, 32 or 64", self.image_size));
        }
        if self.resolved_arch() == Arch::Mlp && !matches!(self.dataset, DatasetSpec::Ring(_) | DatasetSpec::Raw(_)) {
            return err("the mlp architecture needs point data".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("lambda_g", "0.25").unwrap();
        cfg.set("checkpoint_dir", "runs/x").unwrap();
        cfg.set("extractor", "random_cnn:4").unwrap();
        cfg.set("subset_n", "512").unwrap();
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(TrainConfig::from_text(&TrainConfig::default().to_text()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = TrainConfig::from_text("# toy\n\nz_dim = 8 # small\n  seed=3\n").unwrap();
        assert_eq!((cfg.z_dim, cfg.seed), (8, 3));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = TrainConfig::from_text("learning_rate = 0.1").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("learning_rate".into()));
        assert!(e.to_string().contains("learning_rate"));
        assert!(matches!(TrainConfig::from_text("z_dim = big"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(TrainConfig::from_text("z_dim"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let odd = TrainConfig { batch_size: 7, ..TrainConfig::default() };
        assert!(odd.validate().is_err());
        assert!(TrainConfig { lfm_mode: LfmMode::Off, ..odd }.validate().is_ok());
        assert!(TrainConfig { lambda_d: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { c_max: 10.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn every_key_has_a_value() {
        let cfg = TrainConfig::default();
        for k in CONFIG_KEYS {
            let mut c = cfg.clone();
            c.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }
}
