//! Run configuration: JSON files with nested or dotted keys, plus
//! `key=value` overrides. Every key has a default and unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use avfusion_core::data::{Split, SynthSpec};
use avfusion_core::fusion::{FusionKind, ModelConfig, Task};
use avfusion_core::harness::{default_val_settings, TrainConfig};
use avfusion_core::robustness::{DropoutPolicy, DropoutVariant, TestSetting};

use crate::error::{CliError, IoContext, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    /// Dataset directory; the synthetic generator is used when absent.
    pub data_path: Option<PathBuf>,
    pub synth: SynthSpec,
    pub fusion: FusionKind,
    pub heads: usize,
    pub latent_dim: usize,
    pub ff_hidden: usize,
    pub qkv_bias: bool,
    pub policy: DropoutPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub factor: f64,
    pub tol: f64,
    /// Defaults to the settings matched to the dropout variant.
    pub val_settings: Option<Vec<TestSetting>>,
    pub eval_settings: Vec<TestSetting>,
    pub eval_split: Split,
    pub checkpoint: Option<PathBuf>,
    /// Row label in reports; defaults to fusion label and dropout variant.
    pub name: Option<String>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            task: Task::Classification { classes: 7 },
            data_path: None,
            synth: SynthSpec::default(),
            fusion: FusionKind::IntermediateAttention,
            heads: 1,
            latent_dim: 64,
            ff_hidden: 128,
            qkv_bias: false,
            policy: DropoutPolicy::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            patience: train.patience,
            factor: train.factor,
            tol: train.tol,
            val_settings: None,
            eval_settings: vec![TestSetting::AV, TestSetting::A, TestSetting::V],
            eval_split: Split::Test,
            checkpoint: None,
            name: None,
            seed: 0,
            out: PathBuf::from("run"),
        }
    }
}

fn expect<T>(key: &str, v: &Value, what: &str, got: Option<T>) -> Result<T> {
    got.ok_or_else(|| CliError::config(key, format!("expected {what}, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    expect(key, v, "a number", v.as_f64())
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    let n = expect(key, v, "a non-negative integer", v.as_u64())?;
    usize::try_from(n).map_err(|_| CliError::config(key, "value too large"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    expect(key, v, "true or false", v.as_bool())
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    expect(key, v, "a string", v.as_str())
}

fn as_path(key: &str, v: &Value) -> Result<Option<PathBuf>> {
    if v.is_null() {
        return Ok(None);
    }
    Ok(Some(PathBuf::from(as_str(key, v)?)))
}

/// A list of setting codes, as a JSON array or a comma-separated string.
pub fn parse_settings(key: &str, v: &Value) -> Result<Vec<TestSetting>> {
    let items: Vec<String> = match v {
        Value::String(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        Value::Array(a) => a.iter().map(|x| as_str(key, x).map(str::to_string)).collect::<Result<_>>()?,
        _ => return Err(CliError::config(key, format!("expected a list of settings like \"AV,A,V\", got {v}"))),
    };
    let parsed = items
        .iter()
        .map(|s| {
            TestSetting::parse(s).ok_or_else(|| CliError::config(key, format!("unknown setting `{s}` (use AV, A, V, NA, NV)")))
        })
        .collect::<Result<Vec<_>>>()?;
    if parsed.is_empty() {
        return Err(CliError::config(key, "at least one setting is required"));
    }
    Ok(parsed)
}

fn settings_value(s: &[TestSetting]) -> Value {
    Value::Array(s.iter().map(|t| Value::from(t.code())).collect())
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "task.mode" => {
                let classes = match self.task {
                    Task::Classification { classes } => classes,
                    Task::Regression => 7,
                };
                self.task = match as_str(key, v)? {
                    "classification" => Task::Classification { classes },
                    "regression" => Task::Regression,
                    other => {
                        return Err(CliError::config(
                            key,
                            format!("expected \"classification\" or \"regression\", got \"{other}\""),
                        ))
                    }
                };
            }
            "task.classes" => {
                let c = as_usize(key, v)?;
                if let Task::Classification { classes } = &mut self.task {
                    *classes = c;
                }
                // remembered for a later switch back to classification
                self.synth.task = Task::Classification { classes: c };
            }
            "data.path" => self.data_path = as_path(key, v)?,
            "synth.audio_len" => self.synth.audio_len = as_usize(key, v)?,
            "synth.vision_len" => self.synth.vision_len = as_usize(key, v)?,
            "synth.audio_dim" => self.synth.audio_dim = as_usize(key, v)?,
            "synth.vision_dim" => self.synth.vision_dim = as_usize(key, v)?,
            "synth.audio_strength" => self.synth.audio_strength = as_f64(key, v)?,
            "synth.vision_strength" => self.synth.vision_strength = as_f64(key, v)?,
            "synth.redundancy" => self.synth.redundancy = as_f64(key, v)?,
            "synth.noise_std" => self.synth.noise_std = as_f64(key, v)?,
            "synth.latent_dim" => self.synth.latent_dim = as_usize(key, v)?,
            "synth.group_size" => self.synth.group_size = as_usize(key, v)?,
            "synth.train" => self.synth.train = as_usize(key, v)?,
            "synth.val" => self.synth.val = as_usize(key, v)?,
            "synth.test" => self.synth.test = as_usize(key, v)?,
            "synth.seed" => self.synth.seed = as_usize(key, v)? as u64,
            "model.latent_dim" => self.latent_dim = as_usize(key, v)?,
            "model.ff_hidden" => self.ff_hidden = as_usize(key, v)?,
            "model.qk_bias" => self.qkv_bias = as_bool(key, v)?,
            "fusion.kind" => {
                let s = as_str(key, v)?;
                self.fusion = FusionKind::parse(s)
                    .ok_or_else(|| CliError::config(key, format!("expected one of LT, IT, IA, TAV, TVA, got \"{s}\"")))?;
            }
            "fusion.heads" => self.heads = as_usize(key, v)?,
            "dropout.variant" => {
                let s = as_str(key, v)?;
                self.policy.variant = DropoutVariant::parse(s)
                    .ok_or_else(|| CliError::config(key, format!("expected none, hard, soft or noise, got \"{s}\"")))?;
            }
            "dropout.p_full" => self.policy.p_full = as_f64(key, v)?,
            "dropout.p_drop_audio" => self.policy.p_drop_audio = as_f64(key, v)?,
            "dropout.p_drop_vision" => self.policy.p_drop_vision = as_f64(key, v)?,
            "dropout.p_soft" => self.policy.p_soft = as_f64(key, v)?,
            "optim.lr" => self.lr = as_f64(key, v)?,
            "optim.momentum" => self.momentum = as_f64(key, v)?,
            "optim.weight_decay" => self.weight_decay = as_f64(key, v)?,
            "optim.batch_size" => self.batch_size = as_usize(key, v)?,
            "optim.epochs" => self.epochs = as_usize(key, v)?,
            "sched.patience" => self.patience = as_usize(key, v)?,
            "sched.factor" => self.factor = as_f64(key, v)?,
            "sched.tol" => self.tol = as_f64(key, v)?,
            "eval.settings" => self.eval_settings = parse_settings(key, v)?,
            "eval.val_settings" => {
                self.val_settings = if v.is_null() { None } else { Some(parse_settings(key, v)?) }
            }
            "eval.split" => {
                let s = as_str(key, v)?;
                self.eval_split = Split::parse(s)
                    .ok_or_else(|| CliError::config(key, format!("expected train, val or test, got \"{s}\"")))?;
            }
            "eval.checkpoint" => self.checkpoint = as_path(key, v)?,
            "report.name" => self.name = if v.is_null() { None } else { Some(as_str(key, v)?.to_string()) },
            "seed" => self.seed = as_usize(key, v)? as u64,
            "out" => self.out = as_path(key, v)?.ok_or_else(|| CliError::config(key, "expected a directory path"))?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value.
    pub fn to_flat(&self) -> BTreeMap<&'static str, Value> {
        let s = &self.synth;
        let p = &self.policy;
        let (mode, classes) = match self.task {
            Task::Classification { classes } => ("classification", classes),
            Task::Regression => (
                "regression",
                match s.task {
                    Task::Classification { classes } => classes,
                    Task::Regression => 7,
                },
            ),
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(Value::Null, |p| Value::from(p.display().to_string()));
        BTreeMap::from([
            ("task.mode", json!(mode)),
            ("task.classes", json!(classes)),
            ("data.path", path(&self.data_path)),
            ("synth.audio_len", json!(s.audio_len)),
            ("synth.vision_len", json!(s.vision_len)),
            ("synth.audio_dim", json!(s.audio_dim)),
            ("synth.vision_dim", json!(s.vision_dim)),
            ("synth.audio_strength", json!(s.audio_strength)),
            ("synth.vision_strength", json!(s.vision_strength)),
            ("synth.redundancy", json!(s.redundancy)),
            ("synth.noise_std", json!(s.noise_std)),
            ("synth.latent_dim", json!(s.latent_dim)),
            ("synth.group_size", json!(s.group_size)),
            ("synth.train", json!(s.train)),
            ("synth.val", json!(s.val)),
            ("synth.test", json!(s.test)),
            ("synth.seed", json!(s.seed)),
            ("model.latent_dim", json!(self.latent_dim)),
            ("model.ff_hidden", json!(self.ff_hidden)),
            ("model.qk_bias", json!(self.qkv_bias)),
            ("fusion.kind", json!(self.fusion.code())),
            ("fusion.heads", json!(self.heads)),
            ("dropout.variant", json!(p.variant.name())),
            ("dropout.p_full", json!(p.p_full)),
            ("dropout.p_drop_audio", json!(p.p_drop_audio)),
            ("dropout.p_drop_vision", json!(p.p_drop_vision)),
            ("dropout.p_soft", json!(p.p_soft)),
            ("optim.lr", json!(self.lr)),
            ("optim.momentum", json!(self.momentum)),
            ("optim.weight_decay", json!(self.weight_decay)),
            ("optim.batch_size", json!(self.batch_size)),
            ("optim.epochs", json!(self.epochs)),
            ("sched.patience", json!(self.patience)),
            ("sched.factor", json!(self.factor)),
            ("sched.tol", json!(self.tol)),
            ("eval.settings", settings_value(&self.eval_settings)),
            ("eval.val_settings", self.val_settings.as_deref().map_or(Value::Null, settings_value)),
            ("eval.split", json!(self.eval_split.name())),
            ("eval.checkpoint", path(&self.checkpoint)),
            ("report.name", self.name.as_ref().map_or(Value::Null, |n| json!(n))),
            ("seed", json!(self.seed)),
            ("out", json!(self.out.display().to_string())),
        ])
    }

    /// Nested JSON form of [`RunConfig::to_flat`].
    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        for (key, v) in self.to_flat() {
            match key.split_once('.') {
                Some((section, leaf)) => {
                    let entry = root.entry(section).or_insert_with(|| Value::Object(Map::new()));
                    entry.as_object_mut().expect("section object").insert(leaf.to_string(), v);
                }
                None => {
                    root.insert(key.to_string(), v);
                }
            }
        }
        Value::Object(root)
    }

    pub fn validate(&self) -> Result<()> {
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(CliError::config("task.classes", "need at least 2 classes"));
            }
        }
        self.synth_spec()
            .validate()
            .map_err(|e| CliError::config("synth", e.to_string()))?;
        if self.heads == 0 || self.latent_dim == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(CliError::config("fusion.heads", "must be positive and divide model.latent_dim"));
        }
        if self.ff_hidden == 0 {
            return Err(CliError::config("model.ff_hidden", "must be positive"));
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::config(self.failing_train_key(), e.to_string()))?;
        Ok(())
    }

    fn failing_train_key(&self) -> &'static str {
        if self.policy.validate().is_err() {
            "dropout"
        } else if self.batch_size == 0 {
            "optim.batch_size"
        } else if !(self.lr > 0.0 && self.lr.is_finite()) {
            "optim.lr"
        } else if !(0.0..1.0).contains(&self.momentum) {
            "optim.momentum"
        } else if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            "optim.weight_decay"
        } else {
            "sched"
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            task: self.task,
            ..self.synth.clone()
        }
    }

    pub fn model_config(&self, audio_dim: usize, vision_dim: usize) -> ModelConfig {
        ModelConfig {
            audio_dim,
            vision_dim,
            fusion: self.fusion,
            heads: self.heads,
            latent_dim: self.latent_dim,
            ff_hidden: self.ff_hidden,
            task: self.task,
            qkv_bias: self.qkv_bias,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            patience: self.patience,
            factor: self.factor,
            tol: self.tol,
            policy: self.policy,
            val_settings: self
                .val_settings
                .clone()
                .unwrap_or_else(|| default_val_settings(self.policy.variant)),
            seed: self.seed,
        }
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let label = self.fusion.label(self.heads);
            match self.policy.variant {
                DropoutVariant::None => label,
                v => format!("{label}-{}", v.name()),
            }
        })
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Applies a JSON document (nested objects or dotted keys) to `cfg`.
pub fn apply_json(cfg: &mut RunConfig, doc: &Value) -> Result<()> {
    if !doc.is_object() {
        return Err(CliError::config("<root>", "expected a JSON object"));
    }
    let mut pairs = Vec::new();
    flatten("", doc, &mut pairs);
    // keys such as task.mode must land before task.classes is interpreted
    pairs.sort_by_key(|(k, _)| k != "task.mode");
    for (k, v) in pairs {
        cfg.set(&k, &v)?;
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON and falls back to a plain
/// string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::from(v));
    Ok((k.trim().to_string(), v))
}

/// Command-line sources layered over the defaults, lowest priority first.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub settings: Option<String>,
}

pub fn resolve(src: &Sources) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &src.file {
        let text = std::fs::read_to_string(path).at(path)?;
        if !text.trim().is_empty() {
            let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
            apply_json(&mut cfg, &doc)?;
        }
    }
    for s in &src.sets {
        let (k, v) = parse_override(s)?;
        cfg.set(&k, &v)?;
    }
    if let Some(seed) = src.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &src.out {
        cfg.out = out.clone();
    }
    if let Some(s) = &src.settings {
        cfg.eval_settings = parse_settings("--settings", &Value::from(s.as_str()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved configuration as `config.json` in `dir`.
pub fn echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes");
    std::fs::write(&path, text + "\n").at(&path)
}
