//! Run configuration: defaults, an optional config file (JSON, or
//! `dotted.key = value` lines), `--set` overrides, then explicit flags.
//! Unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autocl_core::eval::FinetuneConfig;
use autocl_core::models::{BidirMerge, GeneratorVariant, ModelSpec};
use autocl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Model hyperparameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub conv_channels: [usize; 3],
    pub conv_kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub gru_layers: usize,
    /// Defaults to four times the channel count.
    pub gru_hidden: Option<usize>,
    pub projector_softmax: bool,
    pub variant: GeneratorVariant,
    pub bidir_merge: BidirMerge,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let spec = ModelSpec::new(1, 1);
        Self {
            conv_channels: spec.conv_channels,
            conv_kernel: spec.conv_kernel,
            pool: spec.pool,
            dropout: spec.dropout,
            proj_hidden: spec.proj_hidden,
            proj_out: spec.proj_out,
            gru_layers: spec.gru_layers,
            gru_hidden: None,
            projector_softmax: spec.projector_softmax,
            variant: spec.variant,
            bidir_merge: spec.bidir_merge,
            bn_eps: spec.bn_eps,
            bn_momentum: spec.bn_momentum,
        }
    }
}

impl ModelOptions {
    pub fn to_spec(&self, window_size: usize, num_channels: usize) -> ModelSpec {
        ModelSpec {
            window_size,
            num_channels,
            conv_channels: self.conv_channels,
            conv_kernel: self.conv_kernel,
            pool: self.pool,
            dropout: self.dropout,
            proj_hidden: self.proj_hidden,
            proj_out: self.proj_out,
            gru_layers: self.gru_layers,
            gru_hidden: self.gru_hidden.unwrap_or(4 * num_channels),
            projector_softmax: self.projector_softmax,
            variant: self.variant,
            bidir_merge: self.bidir_merge,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeOptions {
    pub embeddings: bool,
    pub aug_views: bool,
    /// Windows sampled for the augmentation-view export.
    pub k: usize,
    /// Export projections `y` instead of encoder features `z`.
    pub projection: bool,
    pub seed: u64,
}

impl Default for VisualizeOptions {
    fn default() -> Self {
        Self {
            embeddings: false,
            aug_views: false,
            k: 3,
            projection: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `prepare` input: `ucihar:<dir>` or `synthetic:<spec.json>`.
    pub source: Option<String>,
    /// Dataset container directory.
    pub data: Option<PathBuf>,
    /// Output directory for this command.
    pub out: Option<PathBuf>,
    /// Checkpoint read by `evaluate` and `visualize`.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelOptions,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Labeled share of each class used for fine-tuning.
    pub fraction: f64,
    /// Seed of the few-shot split; defaults to `finetune.seed`.
    pub split_seed: Option<u64>,
    pub visualize: VisualizeOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: None,
            data: None,
            out: None,
            checkpoint: None,
            model: ModelOptions::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            fraction: 0.2,
            split_seed: None,
            visualize: VisualizeOptions::default(),
        }
    }
}

/// Parses `value` as JSON when possible, otherwise keeps it as a string.
fn scalar(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Sets `a.b.c` in a nested JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed config key {key:?}");
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            bail!("config key {key:?} descends into a non-object");
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => bail!("config key {key:?} descends into a non-object"),
    }
}

/// Parses `key=value` into a path and JSON value.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let Some((k, v)) = text.split_once('=') else {
        bail!("expected key=value, got {text:?}");
    };
    Ok((k.trim().to_string(), scalar(v.trim())))
}

/// Reads a config file: a JSON object, or one `key = value` per line with
/// `#` comments.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(&text)
            .with_context(|| format!("invalid JSON in {}", path.display()));
    }
    let mut root = Value::Object(Map::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line)
            .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        set_path(&mut root, &k, v)?;
    }
    Ok(root)
}

/// Merges `overlay` into `base`, recursing into objects.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then the config file, then `--set` assignments, then flags.
pub fn resolve(file: Option<&Path>, sets: &[String], flags: Vec<(String, Value)>) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        merge(&mut root, read_config_file(path)?);
    }
    for s in sets {
        let (k, v) = parse_assignment(s)?;
        set_path(&mut root, &k, v)?;
    }
    for (k, v) in flags {
        set_path(&mut root, &k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(root).context("invalid configuration")?;
    if !(cfg.fraction > 0.0 && cfg.fraction < 1.0) {
        bail!("fraction must lie in (0, 1), got {}", cfg.fraction);
    }
    Ok(cfg)
}
