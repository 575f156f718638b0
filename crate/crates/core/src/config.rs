//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::imaging::{AugmentPolicy, Preprocess};
use crate::model::{DecodeMode, ModelError, RecognizerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required key {0}")]
    Missing(&'static str),
}

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `vocab_size` is filled in from the vocabulary file.
    pub model: RecognizerConfig,
    pub seed: u64,
    pub max_steps: usize,
    pub val_interval: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Samples per gradient chunk; chunks are the unit of parallel work.
    pub grad_chunk: usize,
    pub augment: Option<AugmentPolicy>,
    pub preprocess: Preprocess,
    pub decode_mode: DecodeMode,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub metrics_log: PathBuf,
    pub report: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: RecognizerConfig::default(),
            seed: 7,
            max_steps: 5000,
            val_interval: 200,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            clip_norm: 1.0,
            grad_chunk: 4,
            augment: Some(AugmentPolicy::default()),
            preprocess: Preprocess::default(),
            decode_mode: DecodeMode::Autoregressive,
            train_manifest: None,
            val_manifest: None,
            vocab: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            metrics_log: PathBuf::from("metrics.tsv"),
            report: PathBuf::from("report.tsv"),
        }
    }
}

const RUN_KEYS: &[&str] = &[
    "seed",
    "max_steps",
    "val_interval",
    "batch_size",
    "learning_rate",
    "momentum",
    "clip_norm",
    "grad_chunk",
    "augment",
    "aug_rotation",
    "aug_translate",
    "aug_scale_min",
    "aug_scale_max",
    "aug_blur_prob",
    "aug_blur_sigma",
    "aug_crop",
    "median_radius",
    "gaussian_sigma",
    "deskew",
    "contrast",
    "decode_mode",
    "refine",
    "train_manifest",
    "val_manifest",
    "vocab",
    "checkpoint_dir",
    "metrics_log",
    "report",
];

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

impl RunConfig {
    /// Parse config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut aug = AugmentPolicy::default();
        let mut augment_on = true;
        let mut refine = 1usize;
        let mut nar = false;
        let mut seen = std::collections::HashSet::new();

        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1 });
            }
            let known = RUN_KEYS.contains(&key) || (RecognizerConfig::KEYS.contains(&key) && key != "vocab_size");
            if !known {
                return Err(ConfigError::UnknownKey {
                    line: n + 1,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line: n + 1,
                    key: key.to_string(),
                });
            }
            let path = |v: &str| base_dir.join(v);
            match key {
                "seed" => cfg.seed = num(key, value)?,
                "max_steps" => cfg.max_steps = num(key, value)?,
                "val_interval" => cfg.val_interval = num(key, value)?,
                "batch_size" => cfg.batch_size = num(key, value)?,
                "learning_rate" => cfg.learning_rate = num(key, value)?,
                "momentum" => cfg.momentum = num(key, value)?,
                "clip_norm" => cfg.clip_norm = num(key, value)?,
                "grad_chunk" => cfg.grad_chunk = num(key, value)?,
                "augment" => augment_on = flag(key, value)?,
                "aug_rotation" => aug.rotation_deg = num(key, value)?,
                "aug_translate" => aug.translate_frac = num(key, value)?,
                "aug_scale_min" => aug.scale_min = num(key, value)?,
                "aug_scale_max" => aug.scale_max = num(key, value)?,
                "aug_blur_prob" => aug.blur_prob = num(key, value)?,
                "aug_blur_sigma" => aug.blur_sigma_max = num(key, value)?,
                "aug_crop" => aug.crop_frac = num(key, value)?,
                "median_radius" => {
                    let r: usize = num(key, value)?;
                    cfg.preprocess.median_radius = (r > 0).then_some(r);
                }
                "gaussian_sigma" => {
                    let s: f64 = num(key, value)?;
                    cfg.preprocess.gaussian_sigma = (s > 0.0).then_some(s);
                }
                "deskew" => cfg.preprocess.deskew = flag(key, value)?,
                "contrast" => cfg.preprocess.contrast = flag(key, value)?,
                "decode_mode" => {
                    nar = match value {
                        "ar" => false,
                        "nar" => true,
                        _ => return Err(invalid(key, value, "expected ar or nar")),
                    }
                }
                "refine" => refine = num(key, value)?,
                "train_manifest" => cfg.train_manifest = Some(path(value)),
                "val_manifest" => cfg.val_manifest = Some(path(value)),
                "vocab" => cfg.vocab = Some(path(value)),
                "checkpoint_dir" => cfg.checkpoint_dir = path(value),
                "metrics_log" => cfg.metrics_log = path(value),
                "report" => cfg.report = path(value),
                _ => cfg.model.set(key, value).map_err(|e| match e {
                    ModelError::InvalidConfig(reason) => invalid(key, value, reason),
                    other => invalid(key, value, other.to_string()),
                })?,
            }
        }
        if !seen.contains("checkpoint_dir") {
            cfg.checkpoint_dir = base_dir.join(&cfg.checkpoint_dir);
        }
        if !seen.contains("metrics_log") {
            cfg.metrics_log = base_dir.join(&cfg.metrics_log);
        }
        if !seen.contains("report") {
            cfg.report = base_dir.join(&cfg.report);
        }
        cfg.augment = augment_on.then_some(aug);
        cfg.decode_mode = if nar {
            DecodeMode::NonAutoregressive { refine }
        } else {
            DecodeMode::Autoregressive
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(invalid(key, &value, reason))
            }
        };
        check(self.val_interval >= 1, "val_interval", self.val_interval.to_string(), "must be >= 1")?;
        check(self.batch_size >= 1, "batch_size", self.batch_size.to_string(), "must be >= 1")?;
        check(self.grad_chunk >= 1, "grad_chunk", self.grad_chunk.to_string(), "must be >= 1")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            self.learning_rate.to_string(),
            "must be positive",
        )?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            self.momentum.to_string(),
            "must be in [0, 1)",
        )?;
        check(
            self.clip_norm > 0.0 && self.clip_norm.is_finite(),
            "clip_norm",
            self.clip_norm.to_string(),
            "must be positive",
        )?;
        if let Some(a) = &self.augment {
            let ranges = [
                ("aug_rotation", a.rotation_deg, 0.0, 45.0),
                ("aug_translate", a.translate_frac, 0.0, 0.5),
                ("aug_scale_min", a.scale_min, 0.1, 10.0),
                ("aug_scale_max", a.scale_max, 0.1, 10.0),
                ("aug_blur_prob", a.blur_prob, 0.0, 1.0),
                ("aug_blur_sigma", a.blur_sigma_max, 0.0, 10.0),
                ("aug_crop", a.crop_frac, 0.0, 0.4),
            ];
            for (key, v, lo, hi) in ranges {
                check((lo..=hi).contains(&v), key, v.to_string(), &format!("must be in [{lo}, {hi}]"))?;
            }
            check(
                a.scale_min <= a.scale_max,
                "aug_scale_min",
                a.scale_min.to_string(),
                "must not exceed aug_scale_max",
            )?;
        }
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(crate::shaping::NUM_SPECIALS + 1);
        model.validate().map_err(|e| invalid("model", String::new().as_str(), e.to_string()))
    }

    /// Render back to the config format (paths as given).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            if k != "vocab_size" {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        let a = self.augment.clone().unwrap_or_default();
        let p = &self.preprocess;
        let (mode, refine) = match self.decode_mode {
            DecodeMode::Autoregressive => ("ar", 1),
            DecodeMode::NonAutoregressive { refine } => ("nar", refine),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("val_interval", self.val_interval.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("grad_chunk", self.grad_chunk.to_string()),
            ("augment", self.augment.is_some().to_string()),
            ("aug_rotation", a.rotation_deg.to_string()),
            ("aug_translate", a.translate_frac.to_string()),
            ("aug_scale_min", a.scale_min.to_string()),
            ("aug_scale_max", a.scale_max.to_string()),
            ("aug_blur_prob", a.blur_prob.to_string()),
            ("aug_blur_sigma", a.blur_sigma_max.to_string()),
            ("aug_crop", a.crop_frac.to_string()),
            ("median_radius", p.median_radius.unwrap_or(0).to_string()),
            ("gaussian_sigma", p.gaussian_sigma.unwrap_or(0.0).to_string()),
            ("deskew", p.deskew.to_string()),
            ("contrast", p.contrast.to_string()),
            ("decode_mode", mode.to_string()),
            ("refine", refine.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        let paths = [
            ("train_manifest", self.train_manifest.as_ref()),
            ("val_manifest", self.val_manifest.as_ref()),
            ("vocab", self.vocab.as_ref()),
            ("checkpoint_dir", Some(&self.checkpoint_dir)),
            ("metrics_log", Some(&self.metrics_log)),
            ("report", Some(&self.report)),
        ];
        for (k, v) in paths {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {}", v.display());
            }
        }
        out
    }
}
