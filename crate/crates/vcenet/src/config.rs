//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! data.root = data/synth
//! model.channels = 32
//! mam.upsample = bilinear
//! ```
//!
//! Unknown keys are errors. Every key has a default, and values are normalized
//! when parsed (`0.0010` and `1e-3` both become `0.001`), so the canonical text,
//! all keys sorted with normalized values, and its SHA-256 hash depend only on the
//! effective configuration, not on how it was spelled.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vcenet_core::backbone::{BackboneConfig, BackboneVariant, GridAlign};
use vcenet_core::checkpoint::{hex, sha256};
use vcenet_core::loss::LossKind;
use vcenet_core::model::ModelConfig;
use vcenet_core::ops::Upsample;
use vcenet_core::optim::{OptimConfig, OptimizerKind};

use crate::error::CliError;

type Normalizer = fn(&str) -> Result<String, String>;

fn uint(v: &str) -> Result<String, String> {
    v.parse::<u64>().map(|n| n.to_string()).map_err(|_| "expected a non-negative integer".into())
}

fn positive(v: &str) -> Result<String, String> {
    match v.parse::<u64>() {
        Ok(0) | Err(_) => Err("expected a positive integer".into()),
        Ok(n) => Ok(n.to_string()),
    }
}

fn real(v: &str) -> Result<String, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(format!("{x:?}")),
        _ => Err("expected a finite number".into()),
    }
}

fn boolean(v: &str) -> Result<String, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok("true".into()),
        "false" | "0" | "no" | "off" => Ok("false".into()),
        _ => Err("expected true or false".into()),
    }
}

fn text(v: &str) -> Result<String, String> {
    Ok(v.to_string())
}

fn backbone(v: &str) -> Result<String, String> {
    BackboneVariant::parse(v).map(|b| b.as_str().into()).ok_or_else(|| "expected tiny_random or pretrained_resnet50".into())
}

fn channels(v: &str) -> Result<String, String> {
    if v == "auto" {
        return Ok(v.into());
    }
    match v.parse::<u64>() {
        Ok(n) if n > 0 && n % 2 == 0 => Ok(n.to_string()),
        _ => Err("expected auto or a positive even integer".into()),
    }
}

fn align(v: &str) -> Result<String, String> {
    if v == "auto" {
        return Ok(v.into());
    }
    GridAlign::parse(v).map(|a| a.as_str().into()).ok_or_else(|| "expected auto, pool, dilation or upsample".into())
}

fn upsample(v: &str) -> Result<String, String> {
    Upsample::parse(v).map(|u| u.as_str().into()).ok_or_else(|| "expected bilinear or nearest".into())
}

fn optimizer(v: &str) -> Result<String, String> {
    OptimizerKind::parse(v).map(|o| o.as_str().into()).ok_or_else(|| "expected sgd or adam".into())
}

fn loss(v: &str) -> Result<String, String> {
    LossKind::parse(v).map(|l| l.as_str().into()).ok_or_else(|| "expected balanced_bce or bce".into())
}

/// Every accepted key with its default and normalizer.
const KEYS: &[(&str, &str, Normalizer)] = &[
    ("seed", "0", uint),
    ("deterministic", "true", boolean),
    ("out_dir", "runs", text),
    ("data.root", "", text),
    ("data.fold", "0", uint),
    ("data.classes_per_fold", "5", positive),
    ("data.fold_file", "", text),
    ("data.image_size", "0", uint),
    ("model.backbone", "tiny_random", backbone),
    ("model.weights", "", text),
    ("model.channels", "auto", channels),
    ("model.adapter", "true", boolean),
    ("model.align", "auto", align),
    ("model.init_seed", "0", uint),
    ("mam.upsample", "bilinear", upsample),
    ("train.iterations", "1000", uint),
    ("train.batch_size", "4", positive),
    ("train.optimizer", "sgd", optimizer),
    ("train.learning_rate", "0.0025", real),
    ("train.momentum", "0.9", real),
    ("train.beta2", "0.999", real),
    ("train.weight_decay", "0.0", real),
    ("train.poly_power", "0.9", real),
    ("train.loss", "balanced_bce", loss),
    ("train.checkpoint_every", "0", uint),
    ("eval.episodes", "1000", positive),
];

/// Default tiny-backbone class-branch width when `model.channels = auto`.
pub const DEFAULT_TINY_CHANNELS: usize = 64;

/// A validated configuration and its canonical form.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

fn parse_line(line: &str) -> Result<Option<(String, String)>, String> {
    let line = line.split_once('#').map_or(line, |(a, _)| a).trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line.split_once('=').ok_or_else(|| format!("expected `key = value`, got `{line}`"))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl Default for Config {
    fn default() -> Self {
        Config { values: KEYS.iter().map(|&(k, d, _)| (k, d.to_string())).collect() }
    }
}

impl Config {
    /// Sets one key, rejecting unknown keys and malformed values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (k, _, norm) = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| CliError::user(format!("unknown configuration key `{key}`")))?;
        let v = norm(value).map_err(|e| CliError::user(format!("`{key}`: {e}, got `{value}`")))?;
        self.values.insert(k, v);
        Ok(())
    }

    /// Parses configuration text, then applies `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line).map_err(|e| CliError::user(format!("line {}: {e}", n + 1)))? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::user(format!("override `{o}` is not of the form key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.model_config().backbone.validate_shape().map_err(CliError::from)?;
        self.optim_config().validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> T {
        self.get(key).parse().unwrap_or_else(|_| panic!("{key} was normalized"))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// Sorted `key = value` lines of every key.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        sha256(self.canonical().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn seed(&self) -> u64 {
        self.num("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.path("data.root")
    }

    pub fn fold_index(&self) -> usize {
        self.num("data.fold")
    }

    pub fn classes_per_fold(&self) -> u32 {
        self.num("data.classes_per_fold")
    }

    pub fn fold_file(&self) -> Option<PathBuf> {
        self.path("data.fold_file")
    }

    /// Square side images are resized to on load; `None` keeps native sizes.
    pub fn image_size(&self) -> Option<usize> {
        Some(self.num("data.image_size")).filter(|&s| s > 0)
    }

    pub fn eval_episodes(&self) -> usize {
        self.num("eval.episodes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let variant = BackboneVariant::parse(self.get("model.backbone")).expect("normalized");
        let mut backbone = match variant {
            BackboneVariant::TinyRandom => BackboneConfig::tiny(DEFAULT_TINY_CHANNELS),
            BackboneVariant::PretrainedResnet50 => BackboneConfig::resnet50(None),
        };
        if let Ok(c) = self.get("model.channels").parse() {
            backbone.block4_out_channels = c;
        }
        backbone.weights_path = self.path("model.weights").map(|p| p.to_string_lossy().into_owned());
        backbone.adapter_enabled = self.get("model.adapter") == "true";
        backbone.align = GridAlign::parse(self.get("model.align"));
        ModelConfig {
            backbone,
            mam_upsample: Upsample::parse(self.get("mam.upsample")).expect("normalized"),
            init_seed: self.num("model.init_seed"),
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            kind: OptimizerKind::parse(self.get("train.optimizer")).expect("normalized"),
            learning_rate: self.num("train.learning_rate"),
            momentum: self.num("train.momentum"),
            beta2: self.num("train.beta2"),
            weight_decay: self.num("train.weight_decay"),
            poly_power: self.num("train.poly_power"),
        }
    }

    pub fn iterations(&self) -> u64 {
        self.num("train.iterations")
    }

    pub fn batch_size(&self) -> usize {
        self.num("train.batch_size")
    }

    pub fn loss(&self) -> LossKind {
        LossKind::parse(self.get("train.loss")).expect("normalized")
    }

    pub fn checkpoint_every(&self) -> u64 {
        self.num("train.checkpoint_every")
    }

    /// Every accepted key and its default, for documentation.
    pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
        KEYS.iter().map(|&(k, d, _)| (k, d))
    }
}
