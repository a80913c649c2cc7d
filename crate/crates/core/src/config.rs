//! The single JSON config shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::block::{BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::forest::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Checkerboard,
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeSource {
    /// Inputs drawn from the task's own data.
    Data,
    /// Uniform `[-1, 1]` vectors fed straight into each forest layer.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Decisions entering a dead subtree go to the sibling.
    Reroute,
    /// Natural routing; dead nodes add nothing to the output.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub name: String,
    pub seed: u64,
    pub task: Option<Task>,
    pub block: Option<BlockKind>,

    pub trees: usize,
    pub depth: usize,
    pub hidden: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Expert width; by default sized to match a dense block of `hidden`.
    pub expert_hidden: Option<usize>,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,

    pub grid: usize,
    /// Checkerboard evaluation points, or the cap on LM validation windows.
    pub eval_samples: usize,

    pub corpus_path: Option<String>,
    pub corpus_seed: u64,
    pub corpus_chars: usize,
    pub valid_fraction: f64,
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    pub tied: bool,

    pub analyze_samples: usize,
    pub analyze_source: AnalyzeSource,
    pub dead_threshold: u64,
    pub prune_fractions: Vec<f64>,
    pub prune_mode: PruneMode,

    pub bench_width: usize,
    pub bench_dim: usize,
    pub bench_depths: Vec<usize>,
    pub bench_batch: usize,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    /// Worker threads per timed call; 1 keeps timing single-threaded.
    pub bench_threads: usize,
    /// Attention FLOPs per token used for model-level ratios; derived from
    /// `d_model` and `context` when unset.
    pub attention_flops: Option<f64>,

    pub resolution: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 42,
            task: None,
            block: None,
            trees: 4,
            depth: 3,
            hidden: 64,
            experts: 8,
            top_k: 2,
            expert_hidden: None,
            optimizer: OptimizerKind::Adamw,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            schedule: ScheduleKind::Constant,
            warmup_steps: 0,
            min_lr: 0.0,
            batch_size: 64,
            steps: 2000,
            eval_every: 500,
            grid: 4,
            eval_samples: 4000,
            corpus_path: None,
            corpus_seed: 1234,
            corpus_chars: 60_000,
            valid_fraction: 0.1,
            context: 32,
            d_model: 32,
            layers: 1,
            tied: true,
            analyze_samples: 100_000,
            analyze_source: AnalyzeSource::Data,
            dead_threshold: 0,
            prune_fractions: vec![0.0, 0.1, 0.25, 0.5, 0.75, 0.9],
            prune_mode: PruneMode::Reroute,
            bench_width: 2048,
            bench_dim: 128,
            bench_depths: (0..=11).collect(),
            bench_batch: 256,
            bench_repeats: 5,
            bench_warmup: 2,
            bench_threads: 1,
            attention_flops: None,
            resolution: 256,
        }
    }
}

/// Which keys a command cannot run without.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Train,
    Eval,
    Analyze,
    Prune,
    Bench,
    ExportBoundaries,
}

impl Verb {
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            Verb::Train | Verb::Eval | Verb::Analyze | Verb::Prune | Verb::ExportBoundaries => {
                &["task", "block"]
            }
            Verb::Bench => &[],
        }
    }
}

fn valid_keys() -> Vec<String> {
    match serde_json::to_value(Config::default()).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("config is an object"),
    }
}

fn unknown_key(key: &str, valid: &[String]) -> Error {
    let nearest = valid
        .iter()
        .min_by_key(|k| strsim::levenshtein(key, k))
        .cloned()
        .unwrap_or_default();
    Error::Config(format!("unknown key \"{key}\"; did you mean \"{nearest}\"?"))
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override \"{s}\" is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override \"{s}\" has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Builds a config from a JSON document plus overrides, rejecting unknown keys.
pub fn config_from_value(doc: Value, overrides: &[String]) -> Result<Config> {
    let mut map: Map<String, Value> = match doc {
        Value::Object(m) => m,
        Value::Null => Map::new(),
        other => {
            return Err(Error::Config(format!(
                "config must be a JSON object, found {}",
                type_name(&other)
            )))
        }
    };
    let valid = valid_keys();
    for k in map.keys() {
        if !valid.contains(k) {
            return Err(unknown_key(k, &valid));
        }
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        if !valid.contains(&k) {
            return Err(unknown_key(&k, &valid));
        }
        map.insert(k, v);
    }
    let cfg: Config = serde_json::from_value(Value::Object(map))
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Reads `path` (if given) and applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Null,
    };
    config_from_value(doc, overrides)
}

impl Config {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("trees", self.trees),
            ("hidden", self.hidden),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("grid", self.grid),
            ("eval_samples", self.eval_samples),
            ("corpus_chars", self.corpus_chars),
            ("context", self.context),
            ("d_model", self.d_model),
            ("analyze_samples", self.analyze_samples),
            ("bench_width", self.bench_width),
            ("bench_dim", self.bench_dim),
            ("bench_batch", self.bench_batch),
            ("bench_repeats", self.bench_repeats),
            ("bench_threads", self.bench_threads),
            ("resolution", self.resolution),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("\"{k}\" must be positive")));
            }
        }
        if self.top_k > self.experts {
            return Err(Error::Config(format!(
                "\"top_k\" ({}) exceeds \"experts\" ({})",
                self.top_k, self.experts
            )));
        }
        if self.depth > 20 {
            return Err(Error::Config(format!("\"depth\" {} is too large", self.depth)));
        }
        for (k, v) in [("lr", self.lr), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("\"{k}\" must be positive, got {v}")));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("\"{k}\" must be in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::Config("\"weight_decay\" and \"min_lr\" must be >= 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("\"clip_norm\" must be positive, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config("\"valid_fraction\" must be in [0, 1)".into()));
        }
        if let Some(f) = self.prune_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(Error::Config(format!("prune fraction {f} outside [0, 1)")));
        }
        Ok(())
    }

    pub fn require(&self, verb: Verb) -> Result<()> {
        for &k in verb.required_keys() {
            let missing = match k {
                "task" => self.task.is_none(),
                "block" => self.block.is_none(),
                _ => false,
            };
            if missing {
                return Err(Error::Config(format!("missing required field \"{k}\"")));
            }
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| Error::Config("missing required field \"task\"".into()))
    }

    pub fn block_kind(&self) -> Result<BlockKind> {
        self.block.ok_or_else(|| Error::Config("missing required field \"block\"".into()))
    }

    /// Block shape; MoE experts are sized against a dense block of `hidden`.
    pub fn block_spec(&self) -> Result<BlockSpec> {
        Ok(match self.block_kind()? {
            BlockKind::Dense => BlockSpec::Dense {
                hidden: self.hidden,
            },
            BlockKind::Fff => BlockSpec::Forest {
                trees: self.trees,
                depth: self.depth,
                variant: Variant::PreGelu,
            },
            BlockKind::FffPost => BlockSpec::Forest {
                trees: self.trees,
                depth: self.depth,
                variant: Variant::PostGelu,
            },
            BlockKind::Moe => BlockSpec::Moe {
                experts: self.experts,
                top_k: self.top_k,
                expert_hidden: self.expert_hidden,
                dense_hidden: self.hidden,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
