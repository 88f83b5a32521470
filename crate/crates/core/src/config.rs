//! `key = value` run configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored. Unknown keys
//! and malformed values are rejected with the offending line number. Command-line
//! flags are applied on top through [`RunConfig::set`].

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::BaselineKind;
use crate::codec::{read_text, CountVector};
use crate::data::{SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::net::DenoiserConfig;
use crate::sampler::{SampleConfig, Schedule};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub kind: String,
    pub codebook_size: usize,
    pub total: u32,
    pub n: usize,
    pub data_seed: Option<u64>,
    pub weight: f64,
    pub alpha: f64,
    pub num_classes: usize,
    pub anchor_a: Option<Vec<u32>>,
    pub anchor_b: Option<Vec<u32>>,
    // model
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub label_drop_prob: f64,
    pub precision: Precision,
    // training
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub model_kind: BaselineKind,
    // sampling
    pub sample_steps: usize,
    pub top_p: f64,
    pub guidance_scale: f64,
    pub schedule: Schedule,
    pub class_label: Option<usize>,
    pub sample_seed: u64,
    pub n_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = DenoiserConfig::new(8, 16);
        let train = TrainConfig::default();
        let sample = SampleConfig::default();
        Self {
            kind: "two_point".into(),
            codebook_size: model.codebook_size,
            total: model.total,
            n: 4096,
            data_seed: None,
            weight: 0.5,
            alpha: 1.0,
            num_classes: 0,
            anchor_a: None,
            anchor_b: None,
            embed_dim: model.embed_dim,
            num_layers: model.num_layers,
            num_heads: model.num_heads,
            mlp_ratio: model.mlp_ratio,
            label_drop_prob: model.label_drop_prob,
            precision: Precision::F64,
            steps: train.steps,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            ema_decay: train.ema_decay,
            seed: train.seed,
            eval_every: train.eval_every,
            checkpoint_path: None,
            data_path: None,
            log_path: None,
            model_kind: BaselineKind::Fsdd,
            sample_steps: sample.num_steps,
            top_p: sample.top_p,
            guidance_scale: sample.guidance_scale,
            schedule: sample.schedule,
            class_label: None,
            sample_seed: 0,
            n_samples: 1000,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_vector(key: &str, value: &str) -> Result<Vec<u32>> {
    value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "kind", "C", "M", "n", "data_seed", "weight", "alpha", "num_classes", "anchor_a", "anchor_b",
        "embed_dim", "num_layers", "num_heads", "mlp_ratio", "label_drop_prob", "precision", "steps",
        "batch_size", "learning_rate", "weight_decay", "ema_decay", "seed", "eval_every",
        "checkpoint_path", "data_path", "log_path", "fixed_sum", "model_kind", "sample_steps", "top_p",
        "guidance_scale", "schedule", "class_label", "sample_seed", "n_samples",
    ];

    /// Sets one key; the same entry point serves config files and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "kind" => {
                match value {
                    "two_point" | "dirichlet_multinomial" | "class_conditional_two_point" => {}
                    other => {
                        return Err(Error::InvalidArgument(format!("unknown data kind `{other}`")))
                    }
                }
                self.kind = value.to_string();
            }
            "C" => self.codebook_size = parse_value(key, value)?,
            "M" => self.total = parse_value(key, value)?,
            "n" => self.n = parse_value(key, value)?,
            "data_seed" => self.data_seed = Some(parse_value(key, value)?),
            "weight" => self.weight = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "anchor_a" => self.anchor_a = Some(parse_vector(key, value)?),
            "anchor_b" => self.anchor_b = Some(parse_vector(key, value)?),
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "num_layers" => self.num_layers = parse_value(key, value)?,
            "num_heads" => self.num_heads = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "label_drop_prob" => self.label_drop_prob = parse_value(key, value)?,
            "precision" => self.precision = value.parse()?,
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(value)),
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "log_path" => self.log_path = Some(PathBuf::from(value)),
            "fixed_sum" => {
                self.model_kind = if parse_bool(key, value)? {
                    BaselineKind::Fsdd
                } else {
                    BaselineKind::DiscreteNoFixedSum
                }
            }
            "model_kind" => self.model_kind = value.parse()?,
            "sample_steps" => self.sample_steps = parse_value(key, value)?,
            "top_p" => self.top_p = parse_value(key, value)?,
            "guidance_scale" => self.guidance_scale = parse_value(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "class_label" => {
                self.class_label = if value == "none" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "sample_seed" => self.sample_seed = parse_value(key, value)?,
            "n_samples" => self.n_samples = parse_value(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, found `{line}`")))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let anchor = |v: &Option<Vec<u32>>| -> Result<Option<CountVector>> {
            v.as_ref()
                .map(|c| CountVector::new(c.clone(), self.total))
                .transpose()
        };
        let kind = match self.kind.as_str() {
            "two_point" => {
                let anchors = match (anchor(&self.anchor_a)?, anchor(&self.anchor_b)?) {
                    (Some(a), Some(b)) => Some([a, b]),
                    (None, None) => None,
                    _ => {
                        return Err(Error::InvalidArgument(
                            "anchor_a and anchor_b must be given together".into(),
                        ))
                    }
                };
                SyntheticKind::TwoPoint {
                    anchors,
                    weight: self.weight,
                }
            }
            "dirichlet_multinomial" => SyntheticKind::DirichletMultinomial { alpha: self.alpha },
            "class_conditional_two_point" => SyntheticKind::ClassConditionalTwoPoint {
                num_classes: self.num_classes,
                anchors: None,
                weight: self.weight,
            },
            other => return Err(Error::InvalidArgument(format!("unknown data kind `{other}`"))),
        };
        let spec = SyntheticSpec {
            kind,
            codebook_size: self.codebook_size,
            total: self.total,
            seed: self.data_seed.unwrap_or(self.seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let cfg = DenoiserConfig {
            codebook_size: self.codebook_size,
            total: self.total,
            num_classes: if self.kind == "class_conditional_two_point" {
                self.num_classes
            } else {
                0
            },
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            mlp_ratio: self.mlp_ratio,
            label_drop_prob: self.label_drop_prob,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_path: self.checkpoint_path.clone(),
            log_path: self.log_path.clone(),
            fixed_sum: self.model_kind.fixed_sum(),
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        let cfg = SampleConfig {
            num_steps: self.sample_steps,
            top_p: self.top_p,
            guidance_scale: self.guidance_scale,
            schedule: self.schedule,
            seed: self.sample_seed,
            class_label: self.class_label,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# toy\nkind = two_point\nC = 8  # codebook\nM=16\n\nsteps = 10\nfixed_sum = false\n";
        let mut cfg = RunConfig::parse(text, "toy.cfg").unwrap();
        assert_eq!(cfg.codebook_size, 8);
        assert_eq!(cfg.total, 16);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.model_kind, BaselineKind::DiscreteNoFixedSum);
        cfg.set("steps", "20").unwrap();
        assert_eq!(cfg.steps, 20);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("C = 8\nbogus = 1\n", "x.cfg").unwrap_err();
        assert!(err.to_string().starts_with("x.cfg:2:"), "{err}");
        let err = RunConfig::parse("C = 8\nM = many\n", "x.cfg").unwrap_err();
        assert!(err.to_string().starts_with("x.cfg:2:"), "{err}");
        let err = RunConfig::parse("C 8\n", "x.cfg").unwrap_err();
        assert!(err.to_string().starts_with("x.cfg:1:"), "{err}");
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            let value = match *key {
                "kind" => "two_point",
                "precision" => "f32",
                "fixed_sum" => "true",
                "model_kind" => "fsdd",
                "schedule" => "linear",
                "anchor_a" | "anchor_b" => "1 2",
                "checkpoint_path" | "data_path" | "log_path" => "x",
                "weight" | "alpha" | "label_drop_prob" | "learning_rate" | "weight_decay" | "ema_decay"
                | "top_p" | "guidance_scale" => "0.5",
                _ => "3",
            };
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn explicit_anchors() {
        let cfg = RunConfig::parse("C = 3\nM = 2\nanchor_a = 2 0 0\nanchor_b = 0,1,1\n", "a.cfg").unwrap();
        let spec = cfg.synthetic_spec().unwrap();
        let pair = &spec.anchors().unwrap()[0];
        assert_eq!(pair[1].counts(), &[0, 1, 1]);
        let bad = RunConfig::parse("C = 3\nM = 2\nanchor_a = 2 0 0\n", "a.cfg").unwrap();
        assert!(bad.synthetic_spec().is_err());
    }
}
