//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! name = resnet50_scenario1
//! backbone = resnet50
//! input_size = 384
//! ```
//!
//! Every field of [`TrainConfig`] has a key; unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::Preset;
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::model::{Backbone, NetworkSpec};
use crate::objectives::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Where training and test images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// The four generated samples of [`crate::data::synthetic`], used for
    /// both training and evaluation.
    Synthetic,
    /// Dataset roots with `images/` and `masks/`; split per scenario.
    Roots(Vec<PathBuf>),
    /// Prepared manifest files.
    Manifests { train: PathBuf, test: Vec<PathBuf> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub name: String,
    pub scenario: Scenario,
    pub data: DataSource,
    pub network: NetworkSpec,
    pub loss: LossConfig,
    pub augment_preset: Preset,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr0: f64,
    pub seed: u64,
    /// Epochs between checkpoints; the last epoch is always saved.
    pub checkpoint_every: u64,
    pub precision: Precision,
    /// Optional pretrained backbone file in checkpoint format.
    pub backbone_weights: Option<PathBuf>,
    /// Parent of `runs/<name>`.
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            name: "run".into(),
            scenario: Scenario::I,
            data: DataSource::Synthetic,
            network: NetworkSpec::resnet50(),
            loss: LossConfig::default(),
            augment_preset: Preset::default(),
            batch_size: 4,
            epochs: 300,
            lr0: 1e-4,
            seed: 0,
            checkpoint_every: 1,
            precision: Precision::F32,
            backbone_weights: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_size(v: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("input_size: expected N or HxW, got {v:?}"));
    match v.split_once('x') {
        Some((h, w)) => Ok((
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = v.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn paths(v: &str) -> Vec<PathBuf> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

impl TrainConfig {
    /// Defaults for `backbone` with the full training schedule.
    pub fn for_backbone(backbone: Backbone) -> Self {
        TrainConfig {
            network: NetworkSpec::preset(backbone),
            ..Self::default()
        }
    }

    /// Sets one key. `backbone` resets every network field to that preset,
    /// so it should come before other network keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let n = &mut self.network;
        match key.trim() {
            "name" => self.name = v.to_string(),
            "scenario" => self.scenario = v.parse()?,
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    _ => DataSource::Roots(paths(v)),
                }
            }
            "train_manifest" => {
                let test = match &self.data {
                    DataSource::Manifests { test, .. } => test.clone(),
                    _ => Vec::new(),
                };
                self.data = DataSource::Manifests {
                    train: v.into(),
                    test,
                };
            }
            "test_manifests" => match &mut self.data {
                DataSource::Manifests { test, .. } => *test = paths(v),
                _ => {
                    return Err(Error::Config(
                        "test_manifests requires train_manifest first".into(),
                    ))
                }
            },
            "backbone" => {
                let b: Backbone = v.parse()?;
                let keep = (
                    n.input_size,
                    n.use_maspp,
                    n.use_ca,
                    n.use_cl_branch,
                    n.momentum,
                );
                *n = NetworkSpec::preset(b);
                (
                    n.input_size,
                    n.use_maspp,
                    n.use_ca,
                    n.use_cl_branch,
                    n.momentum,
                ) = keep;
            }
            "input_size" => n.input_size = parse_size(v)?,
            "maspp_channels" => n.maspp_channels = parse(key, v)?,
            "decoder_channels" => n.decoder_channels = parse(key, v)?,
            "low_level_reduced" => n.low_level_reduced = parse(key, v)?,
            "projection_dim" => n.projection_dim = parse(key, v)?,
            "se_reduction" => n.se_reduction = parse(key, v)?,
            "use_maspp" => n.use_maspp = parse_bool(key, v)?,
            "use_ca" => n.use_ca = parse_bool(key, v)?,
            "use_cl_branch" => n.use_cl_branch = parse_bool(key, v)?,
            "momentum" => n.momentum = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "k" => self.loss.k = parse(key, v)?,
            "dice_smooth" => self.loss.dice_smooth = parse(key, v)?,
            "augment_preset" => self.augment_preset = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "lr_schedule" if v == "cosine" => {}
            "lr_schedule" => {
                return Err(Error::Config(format!(
                    "lr_schedule: only cosine is supported, got {v:?}"
                )))
            }
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "backbone_weights" => self.backbone_weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_dir" => self.output_dir = v.into(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let join = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = vec![
            format!("name = {}", self.name),
            format!("scenario = {}", self.scenario),
        ];
        match &self.data {
            DataSource::Synthetic => lines.push("data = synthetic".into()),
            DataSource::Roots(r) => lines.push(format!("data = {}", join(r))),
            DataSource::Manifests { train, test } => {
                lines.push(format!("train_manifest = {}", train.display()));
                lines.push(format!("test_manifests = {}", join(test)));
            }
        }
        lines.extend([
            format!("backbone = {}", n.backbone),
            format!("input_size = {}x{}", n.input_size.0, n.input_size.1),
            format!("maspp_channels = {}", n.maspp_channels),
            format!("decoder_channels = {}", n.decoder_channels),
            format!("low_level_reduced = {}", n.low_level_reduced),
            format!("projection_dim = {}", n.projection_dim),
            format!("se_reduction = {}", n.se_reduction),
            format!("use_maspp = {}", n.use_maspp),
            format!("use_ca = {}", n.use_ca),
            format!("use_cl_branch = {}", n.use_cl_branch),
            format!("momentum = {:?}", n.momentum),
            format!("alpha = {:?}", self.loss.alpha),
            format!("beta = {:?}", self.loss.beta),
            format!("k = {}", self.loss.k),
            format!("dice_smooth = {:?}", self.loss.dice_smooth),
            format!("augment_preset = {}", self.augment_preset),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("lr0 = {:?}", self.lr0),
            "lr_schedule = cosine".to_string(),
            format!("seed = {}", self.seed),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("precision = {}", self.precision),
            format!(
                "backbone_weights = {}",
                self.backbone_weights
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default()
            ),
            format!("output_dir = {}", self.output_dir.display()),
        ]);
        lines.join("\n") + "\n"
    }

    /// Hex SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run name {:?}", self.name)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs and checkpoint_every must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.network.use_cl_branch && self.loss.k == 0 {
            return Err(Error::Config(
                "k must be positive with the contrastive branch".into(),
            ));
        }
        if let DataSource::Roots(r) = &self.data {
            let need = if self.scenario == Scenario::II { 2 } else { 1 };
            if r.len() < need {
                return Err(Error::Config(format!(
                    "scenario {} needs {need} dataset root(s)",
                    self.scenario
                )));
            }
        }
        Ok(())
    }

    /// `runs/<name>` under the output directory.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}
