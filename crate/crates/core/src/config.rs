//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown or repeated keys are errors. Keys not given keep the
//! defaults of [`RunConfig::default`] (the reduced model).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::LayerKind;
use crate::distillation::DistillConfig;
use crate::error::{Error, Result};
use crate::geometry::GtParams;
use crate::matching::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub threshold: f64,
    pub mnn: bool,
    pub gt: GtParams,
    pub distill: DistillConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::reduced(),
            threshold: DEFAULT_THRESHOLD,
            mnn: true,
            gt: GtParams::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "backbone.initial_dim",
    "backbone.block_dims",
    "attention.d_model",
    "attention.n_heads",
    "attention.ffn_dim",
    "attention.layers",
    "matching.tau",
    "matching.threshold",
    "matching.mnn",
    "gt.step",
    "gt.depth_tol",
    "distill.t",
    "distill.c_d",
    "distill.c_t",
    "train.lr0",
    "train.lr_gamma",
    "train.lr_step_epochs",
    "train.micro_batch",
    "train.accum_steps",
    "train.epoch_pairs",
    "train.epochs",
    "train.seed",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
];

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn layers(v: &str) -> std::result::Result<Vec<LayerKind>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| match s.trim() {
            "self" => Ok(LayerKind::SelfAttn),
            "cross" => Ok(LayerKind::Cross),
            other => Err(format!("unknown layer kind `{other}` (expected self or cross)")),
        })
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Teacher architecture with otherwise default settings.
    pub fn teacher() -> Self {
        RunConfig {
            model: ModelConfig::teacher(),
            ..Default::default()
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "backbone.initial_dim" => m.backbone.initial_dim = num(v)?,
            "backbone.block_dims" => m.backbone.block_dims = list(v)?,
            "attention.d_model" => {
                m.attention.d_model = num(v)?;
                m.backbone.d_model = m.attention.d_model;
            }
            "attention.n_heads" => m.attention.n_heads = num(v)?,
            "attention.ffn_dim" => m.attention.ffn_dim = num(v)?,
            "attention.layers" => m.attention.layer_pattern = layers(v)?,
            "matching.tau" => m.tau = num(v)?,
            "matching.threshold" => self.threshold = num(v)?,
            "matching.mnn" => self.mnn = num(v)?,
            "gt.step" => self.gt.grid_step = num(v)?,
            "gt.depth_tol" => self.gt.depth_tol = num(v)?,
            "distill.t" => self.distill.t = num(v)?,
            "distill.c_d" => self.distill.c_d = num(v)?,
            "distill.c_t" => self.distill.c_t = num(v)?,
            "train.lr0" => t.lr0 = num(v)?,
            "train.lr_gamma" => t.lr_gamma = num(v)?,
            "train.lr_step_epochs" => t.lr_step_epochs = num(v)?,
            "train.micro_batch" => t.micro_batch = num(v)?,
            "train.accum_steps" => t.accum_steps = num(v)?,
            "train.epoch_pairs" => t.epoch_pairs = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.beta1" => t.beta1 = num(v)?,
            "train.beta2" => t.beta2 = num(v)?,
            "train.eps" => t.eps = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses over the defaults of `base`, then validates.
    pub fn parse_over(base: RunConfig, text: &str) -> Result<RunConfig> {
        let mut cfg = base;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(at(format!("key `{key}` given twice")));
            }
            cfg.set(key, value.trim()).map_err(|m| at(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::parse_over(RunConfig::default(), text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("matching.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.gt.grid_step != self.model.backbone.output_stride() {
            return Err(Error::Config(format!(
                "gt.step {} must equal the backbone output stride {}",
                self.gt.grid_step,
                self.model.backbone.output_stride()
            )));
        }
        if !(self.gt.depth_tol >= 0.0) {
            return Err(Error::Config(format!("gt.depth_tol must be ≥ 0, got {}", self.gt.depth_tol)));
        }
        Ok(())
    }

    /// Serializes every key; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let pattern: Vec<&str> = m
            .attention
            .layer_pattern
            .iter()
            .map(|k| match k {
                LayerKind::SelfAttn => "self",
                LayerKind::Cross => "cross",
            })
            .collect();
        let values: Vec<String> = vec![
            m.backbone.initial_dim.to_string(),
            join(&m.backbone.block_dims),
            m.attention.d_model.to_string(),
            m.attention.n_heads.to_string(),
            m.attention.ffn_dim.to_string(),
            pattern.join(","),
            format!("{:?}", m.tau),
            format!("{:?}", self.threshold),
            self.mnn.to_string(),
            self.gt.grid_step.to_string(),
            format!("{:?}", self.gt.depth_tol),
            format!("{:?}", self.distill.t),
            format!("{:?}", self.distill.c_d),
            format!("{:?}", self.distill.c_t),
            format!("{:?}", t.lr0),
            format!("{:?}", t.lr_gamma),
            t.lr_step_epochs.to_string(),
            t.micro_batch.to_string(),
            t.accum_steps.to_string(),
            t.epoch_pairs.to_string(),
            t.epochs.to_string(),
            t.seed.to_string(),
            format!("{:?}", t.weight_decay),
            format!("{:?}", t.beta1),
            format!("{:?}", t.beta2),
            format!("{:?}", t.eps),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
