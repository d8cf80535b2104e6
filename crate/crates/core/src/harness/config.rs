//! Declarative experiment settings: `key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adapt::{AugBnConfig, PredictMode, DEFAULT_PRIORS};
use crate::augment::{AugmentKind, AugmentPlan};
use crate::data::{load_images, synthetic_dataset, CorruptionKind, CorruptionSpec, LabeledImage};
use crate::error::{ensure, Error, Result};
use crate::model::Arch;
use crate::trainer::{LrSchedule, TrainConfig};

/// Every recognized key with its default, in the order reports list them.
const SCHEMA: &[(&str, &str)] = &[
    ("arch", "resnet-mini"),
    ("data", "synthetic"),
    ("classes", "10"),
    ("train_per_class", "500"),
    ("test_per_class", "100"),
    ("image_size", "32"),
    ("data_seed", "1"),
    ("epochs", "10"),
    ("batch_size", "64"),
    ("learning_rate", "0.05"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0005"),
    ("bn_momentum", "0.1"),
    ("lr_schedule", "cosine"),
    ("seed", "0"),
    ("mode", "augbn"),
    ("lambda", "0.7"),
    ("n_augments", "2"),
    ("k_compose", "5"),
    ("augment_pool", "jitter,rotate,mirror,vflip,hflip"),
    ("priors", "0,0.3,0.5,0.6,0.7,0.8,0.9,1"),
    ("k_top", "3"),
    ("epsilon", "0.00001"),
    ("std_blend", "false"),
    ("corruptions", "gaussian_noise,contrast,gaussian_blur"),
    ("severity", "5"),
    ("corruption_seed", "0"),
    ("bins", "10"),
    ("reps", "20"),
];

/// Resolved settings; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        ExperimentConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        ensure!(
            SCHEMA.iter().any(|(k, _)| *k == key),
            Config,
            "unknown config key `{key}`"
        );
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))))
            .collect()
    }

    /// Canonical `key = value` text, one line per key in schema order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (key, _) in SCHEMA {
            let _ = writeln!(out, "{key} = {}", self.values[*key]);
        }
        out
    }

    /// SHA-256 of [`resolved`](Self::resolved), hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.resolved().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn arch(&self) -> Result<Arch> {
        self.parsed("arch")
    }

    pub fn mode(&self) -> Result<PredictMode> {
        self.parsed("mode")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.parsed("epochs")?,
            batch_size: self.parsed("batch_size")?,
            learning_rate: self.parsed("learning_rate")?,
            momentum: self.parsed("momentum")?,
            weight_decay: self.parsed("weight_decay")?,
            bn_momentum: self.parsed("bn_momentum")?,
            lr_schedule: self.parsed::<LrSchedule>("lr_schedule")?,
            seed: self.parsed("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augbn_config(&self) -> Result<AugBnConfig> {
        let pool = self
            .list::<String>("augment_pool")?
            .iter()
            .map(|name| AugmentKind::from_name(name))
            .collect::<Result<Vec<_>>>()?;
        let plan = AugmentPlan {
            pool,
            k_compose: self.parsed("k_compose")?,
            n_augments: self.parsed("n_augments")?,
            seed: self.parsed("seed")?,
        };
        let priors: Vec<f32> = self.list("priors")?;
        let mut cfg = AugBnConfig::default();
        cfg.lambda = self.parsed("lambda")?;
        cfg.plan = plan;
        cfg.k_top = self.parsed("k_top")?;
        cfg.epsilon = self.parsed("epsilon")?;
        cfg.std_blend = self.parsed("std_blend")?;
        let cfg = cfg.with_priors(if priors.is_empty() { &DEFAULT_PRIORS } else { &priors })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `severity` is a single level, a comma list, or an inclusive range `a..b`.
    pub fn severities(&self) -> Result<Vec<u8>> {
        let raw = self.get("severity")?;
        let levels: Vec<u8> = match raw.split_once("..") {
            Some((a, b)) => {
                let bound = |s: &str| {
                    s.trim()
                        .parse::<u8>()
                        .map_err(|_| Error::Config(format!("`severity`: cannot parse `{raw}`")))
                };
                (bound(a)?..=bound(b)?).collect()
            }
            None => self.list("severity")?,
        };
        ensure!(!levels.is_empty(), Config, "`severity`: no levels in `{raw}`");
        Ok(levels)
    }

    /// Every (corruption, severity) pair, corruption-major.
    pub fn corruptions(&self) -> Result<Vec<CorruptionSpec>> {
        let severities = self.severities()?;
        let seed: u64 = self.parsed("corruption_seed")?;
        let mut specs = Vec::new();
        for kind in self.list::<CorruptionKind>("corruptions")? {
            for &s in &severities {
                specs.push(CorruptionSpec::new(kind, s, seed)?);
            }
        }
        Ok(specs)
    }

    /// Training or test split: the synthetic set (disjoint seeds per split)
    /// or images loaded from the `data` path.
    pub fn dataset(&self, train: bool) -> Result<Vec<LabeledImage>> {
        let source = self.get("data")?;
        if source != "synthetic" {
            return load_images(source);
        }
        let seed: u64 = self.parsed("data_seed")?;
        let per_class = self.parsed(if train { "train_per_class" } else { "test_per_class" })?;
        synthetic_dataset(
            self.parsed("classes")?,
            per_class,
            self.parsed("image_size")?,
            seed.wrapping_mul(2).wrapping_add(u64::from(!train)),
        )
    }
}
