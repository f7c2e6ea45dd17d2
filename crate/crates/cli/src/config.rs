//! Flat `key=value` run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use envfake_core::encoder::{EncoderKind, EncoderSpec};
use envfake_core::model::ModelConfig;
use envfake_core::training::{ClassWeighting, ClassWeights, TrainConfig};

/// Where training and scoring get layer stacks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Layerstack files listed in the `embeddings` index.
    Embeddings,
    /// Audio from the manifest through the stub encoder, using `stats`.
    Online,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub source: SourceKind,
    pub embeddings: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub encoder: EncoderSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            train_manifest: None,
            dev_manifest: None,
            source: SourceKind::Embeddings,
            embeddings: None,
            stats: None,
            encoder: EncoderSpec { dim: model.dim, ..EncoderSpec::default() },
            model,
            train: TrainConfig::default(),
            finetune_from: None,
        }
    }
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "train_manifest",
    "dev_manifest",
    "source",
    "embeddings",
    "stats",
    "encoder_kind",
    "encoder_seed",
    "num_layers",
    "dim",
    "downsample",
    "hidden",
    "attn_dim",
    "layer_set",
    "lr",
    "batch_size",
    "dropout",
    "max_steps",
    "max_epochs",
    "eval_every",
    "class_weighting",
    "finetune_from",
    "finetune_lr",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("config key {key}: cannot parse {value:?}"))
}

fn opt_path(value: &str, base: &Path) -> Option<PathBuf> {
    match value {
        "" | "none" => None,
        v if Path::new(v).is_absolute() => Some(PathBuf::from(v)),
        v => Some(base.join(v)),
    }
}

impl RunConfig {
    /// Applies one assignment. Relative paths resolve against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                self.seed = num(key, value)?;
                self.train.seed = self.seed;
            }
            "train_manifest" => self.train_manifest = opt_path(value, base),
            "dev_manifest" => self.dev_manifest = opt_path(value, base),
            "source" => {
                self.source = match value {
                    "embeddings" => SourceKind::Embeddings,
                    "online" => SourceKind::Online,
                    other => bail!("config key source: {other:?} is not embeddings | online"),
                }
            }
            "embeddings" => self.embeddings = opt_path(value, base),
            "stats" => self.stats = opt_path(value, base),
            "encoder_kind" => self.encoder.kind = value.parse::<EncoderKind>()?,
            "encoder_seed" => self.encoder.seed = num(key, value)?,
            "num_layers" => {
                self.encoder.num_layers = num(key, value)?;
                self.model.num_layers = self.encoder.num_layers;
            }
            "dim" => {
                self.encoder.dim = num(key, value)?;
                self.model.dim = self.encoder.dim;
            }
            "downsample" => self.encoder.downsample = num(key, value)?,
            "hidden" => self.model.hidden = num(key, value)?,
            "attn_dim" => self.model.attn_dim = num(key, value)?,
            "layer_set" => {
                self.model.layer_set =
                    value.split(',').map(|s| num::<usize>(key, s.trim())).collect::<Result<Vec<_>>>()?
            }
            "lr" => self.train.lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "dropout" => {
                self.train.dropout = num(key, value)?;
                self.model.dropout = self.train.dropout;
            }
            "max_steps" => self.train.max_steps = num(key, value)?,
            "max_epochs" => {
                self.train.max_epochs = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "eval_every" => self.train.eval_every = num(key, value)?,
            "class_weighting" => {
                self.train.class_weighting = match value {
                    "auto" => ClassWeighting::Auto,
                    v => {
                        let (b, s) = v
                            .split_once(',')
                            .ok_or_else(|| anyhow!("class_weighting is auto or <w_bona>,<w_spoof>"))?;
                        ClassWeighting::Explicit(ClassWeights::new(num(key, b.trim())?, num(key, s.trim())?)?)
                    }
                }
            }
            "finetune_from" => self.finetune_from = opt_path(value, base),
            "finetune_lr" => self.train.finetune_lr = num(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key=value", n + 1))?;
            cfg.set(k.trim(), v, base).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).with_context(|| format!("config {}", path.display()))
    }

    /// Applies `key=value` overrides (relative paths against the working directory).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got {o:?}"))?;
            self.set(k.trim(), v, Path::new(""))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let layers: Vec<String> = self.model.layer_set.iter().map(|l| l.to_string()).collect();
        let values = [
            self.seed.to_string(),
            path(&self.train_manifest),
            path(&self.dev_manifest),
            match self.source {
                SourceKind::Embeddings => "embeddings".into(),
                SourceKind::Online => "online".into(),
            },
            path(&self.embeddings),
            path(&self.stats),
            self.encoder.kind.to_string(),
            self.encoder.seed.to_string(),
            self.encoder.num_layers.to_string(),
            self.encoder.dim.to_string(),
            self.encoder.downsample.to_string(),
            self.model.hidden.to_string(),
            self.model.attn_dim.to_string(),
            layers.join(","),
            format!("{:?}", self.train.lr),
            self.train.batch_size.to_string(),
            format!("{:?}", self.train.dropout),
            self.train.max_steps.to_string(),
            self.train.max_epochs.map_or("none".into(), |e| e.to_string()),
            self.train.eval_every.to_string(),
            match self.train.class_weighting {
                ClassWeighting::Auto => "auto".into(),
                ClassWeighting::Explicit(w) => format!("{:?},{:?}", w.bona, w.spoof),
            },
            path(&self.finetune_from),
            format!("{:?}", self.train.finetune_lr),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
