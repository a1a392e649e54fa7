//! Run configuration as a flat `key = value` file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{AggregationMode, InferBranch, Task};
use crate::model::ModelConfig;
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub mode: AggregationMode,
    pub infer_branch: InferBranch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub validation_n: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub min_freq: usize,
    /// Feed ASC examples as the sentence alone, without the aspect segment.
    pub single_segment: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            task: Task::Ae,
            data: None,
            test_data: None,
            mode: AggregationMode::PSum,
            infer_branch: InferBranch::Mean,
            epochs: 4,
            batch_size: 16,
            lr: 3e-5,
            seeds: (1..=9).collect(),
            validation_n: 150,
            num_layers: enc.num_layers,
            hidden_size: enc.hidden_size,
            num_heads: enc.num_heads,
            ff_size: enc.ff_size,
            max_len: enc.max_len,
            dropout: 0.1,
            init_std: enc.init_std,
            min_freq: 1,
            single_segment: false,
            out: PathBuf::from("runs"),
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "task",
    "data",
    "test_data",
    "mode",
    "infer_branch",
    "epochs",
    "batch_size",
    "lr",
    "seeds",
    "validation_n",
    "num_layers",
    "hidden_size",
    "num_heads",
    "ff_size",
    "max_len",
    "dropout",
    "init_std",
    "min_freq",
    "single_segment",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse("seeds", a)?, parse("seeds", b.trim_start_matches('='))?);
                seeds.extend(a..=b);
            }
            None => seeds.push(parse("seeds", part)?),
        }
    }
    Ok(seeds)
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one key. Dashes and underscores are interchangeable so that
    /// `--batch-size` and `batch_size` name the same key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "task" => self.task = parse(&key, value)?,
            "data" => self.data = optional_path(value),
            "test_data" => self.test_data = optional_path(value),
            "mode" => self.mode = parse(&key, value)?,
            "infer_branch" => self.infer_branch = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "seeds" => self.seeds = parse_seeds(value)?,
            "validation_n" => self.validation_n = parse(&key, value)?,
            "num_layers" => self.num_layers = parse(&key, value)?,
            "hidden_size" => self.hidden_size = parse(&key, value)?,
            "num_heads" => self.num_heads = parse(&key, value)?,
            "ff_size" => self.ff_size = parse(&key, value)?,
            "max_len" => self.max_len = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "init_std" => self.init_std = parse(&key, value)?,
            "min_freq" => self.min_freq = parse(&key, value)?,
            "single_segment" => self.single_segment = parse(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key.replace('-', "_").as_str() {
            "task" => self.task.to_string(),
            "data" => path(&self.data),
            "test_data" => path(&self.test_data),
            "mode" => self.mode.to_string(),
            "infer_branch" => self.infer_branch.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "validation_n" => self.validation_n.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "hidden_size" => self.hidden_size.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "ff_size" => self.ff_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "init_std" => self.init_std.to_string(),
            "min_freq" => self.min_freq.to_string(),
            "single_segment" => self.single_segment.to_string(),
            "out" => self.out.display().to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// keys missing from the text keep their defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Inverse of [`RunConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        self.model_config(4).validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            task: self.task,
            mode: self.mode,
            infer_branch: self.infer_branch,
            encoder: EncoderConfig {
                num_layers: self.num_layers,
                hidden_size: self.hidden_size,
                num_heads: self.num_heads,
                ff_size: self.ff_size,
                vocab_size,
                max_len: self.max_len,
                dropout: self.dropout,
                init_std: self.init_std,
                ..EncoderConfig::default()
            },
        }
    }
}
