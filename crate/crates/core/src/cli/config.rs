//! Flat `section.key=value` run configuration.

use std::path::Path;

use crate::harness::model::parse_field;
use crate::harness::{CropConfig, ModelConfig, TrackOptions, TrainConfig};
use crate::losses::LossWeights;
use crate::metrics::DEFAULT_TAU;
use crate::{Error, Result};

/// Environment variable that overrides `training.seed`.
pub const SEED_ENV: &str = "FUSETRACK_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Seed of the synthetic sequence used by `track`.
    pub sequence_seed: u64,
    pub frames: usize,
    pub frame_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { sequence_seed: 1_000_003, frames: 60, frame_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub samples: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup: 10, samples: 30 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub tau: f64,
    pub hanning: bool,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            model_seed: 7,
            training: TrainConfig::default(),
            data: DataConfig::default(),
            tau: DEFAULT_TAU,
            hanning: true,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: source.to_string(),
                line: i + 1,
                msg: format!("expected `key=value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.training.seed = parse_field(SEED_ENV, &v)?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let t = &mut self.training;
        match (section, field) {
            ("model", "seed") => self.model_seed = parse_field(key, value)?,
            ("model", f) => self.model.set(f, value)?,
            ("training", "lr_backbone") => t.lr_backbone = parse_field(key, value)?,
            ("training", "lr_other") => t.lr_other = parse_field(key, value)?,
            ("training", "weight_decay") => t.weight_decay = parse_field(key, value)?,
            ("training", "batch") => t.batch = parse_field(key, value)?,
            ("training", "steps") => t.steps = parse_field(key, value)?,
            ("training", "lambda_giou") => t.loss_weights.giou = parse_field(key, value)?,
            ("training", "lambda_l1") => t.loss_weights.l1 = parse_field(key, value)?,
            ("training", "seed") => t.seed = parse_field(key, value)?,
            ("training", "degrade_prob") => t.curriculum.degrade_prob = parse_field(key, value)?,
            ("training", "max_gap") => t.curriculum.max_gap = parse_field(key, value)?,
            ("training", "jitter") => t.curriculum.jitter = parse_field(key, value)?,
            ("data", "sequence_seed") => self.data.sequence_seed = parse_field(key, value)?,
            ("data", "frames") => self.data.frames = parse_field(key, value)?,
            ("data", "frame_size") => self.data.frame_size = parse_field(key, value)?,
            ("crop", "template_factor") => t.crop.template_factor = parse_field(key, value)?,
            ("crop", "search_factor") => t.crop.search_factor = parse_field(key, value)?,
            ("eval", "tau") => self.tau = parse_field(key, value)?,
            ("inference", "hanning") => self.hanning = parse_field(key, value)?,
            ("bench", "warmup") => self.bench.warmup = parse_field(key, value)?,
            ("bench", "samples") => self.bench.samples = parse_field(key, value)?,
            _ => return Err(Error::Config { field: key.to_string(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { field: field.into(), msg: msg.into() });
        self.model.validate()?;
        self.crop().validate()?;
        let t = &self.training;
        LossWeights::new(t.loss_weights.giou, t.loss_weights.l1)
            .map_err(|e| Error::Config { field: "training.lambda_giou".into(), msg: e.to_string() })?;
        if t.batch == 0 {
            return bad("training.batch", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&t.curriculum.degrade_prob) {
            return bad("training.degrade_prob", "must lie in [0, 1]");
        }
        if !(t.lr_backbone >= 0.0 && t.lr_other >= 0.0 && t.weight_decay >= 0.0) {
            return bad("training.lr_other", "learning rates and weight decay must be non-negative");
        }
        if self.data.frames < 4 {
            return bad("data.frames", "must be at least 4");
        }
        if self.data.frame_size < 32 {
            return bad("data.frame_size", "must be at least 32");
        }
        if !(self.tau > 0.0) {
            return bad("eval.tau", "must be positive");
        }
        if self.bench.samples < 30 {
            return bad("bench.samples", "must be at least 30");
        }
        Ok(())
    }

    /// Crop geometry with output sizes taken from the model.
    pub fn crop(&self) -> CropConfig {
        CropConfig {
            template_size: self.model.template_size,
            search_size: self.model.search_size,
            ..self.training.crop
        }
    }

    /// Training config with crop sizes and frame size resolved.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.training.clone();
        t.crop = self.crop();
        t.curriculum.frame_size = self.data.frame_size;
        t
    }

    pub fn track_options(&self) -> TrackOptions {
        TrackOptions { crop: self.crop(), hanning: self.hanning }
    }

    /// Every field as `key=value` lines, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.training;
        let mut lines: Vec<String> = self.model.entries().into_iter().map(|(k, v)| format!("model.{k}={v}")).collect();
        lines.push(format!("model.seed={}", self.model_seed));
        let rest: [(&str, String); 20] = [
            ("training.lr_backbone", t.lr_backbone.to_string()),
            ("training.lr_other", t.lr_other.to_string()),
            ("training.weight_decay", t.weight_decay.to_string()),
            ("training.batch", t.batch.to_string()),
            ("training.steps", t.steps.to_string()),
            ("training.lambda_giou", t.loss_weights.giou.to_string()),
            ("training.lambda_l1", t.loss_weights.l1.to_string()),
            ("training.seed", t.seed.to_string()),
            ("training.degrade_prob", t.curriculum.degrade_prob.to_string()),
            ("training.max_gap", t.curriculum.max_gap.to_string()),
            ("training.jitter", t.curriculum.jitter.to_string()),
            ("data.sequence_seed", self.data.sequence_seed.to_string()),
            ("data.frames", self.data.frames.to_string()),
            ("data.frame_size", self.data.frame_size.to_string()),
            ("crop.template_factor", t.crop.template_factor.to_string()),
            ("crop.search_factor", t.crop.search_factor.to_string()),
            ("eval.tau", self.tau.to_string()),
            ("inference.hanning", self.hanning.to_string()),
            ("bench.warmup", self.bench.warmup.to_string()),
            ("bench.samples", self.bench.samples.to_string()),
        ];
        lines.extend(rest.into_iter().map(|(k, v)| format!("{k}={v}")));
        lines.join("\n") + "\n"
    }

    /// `to_text` with every line prefixed by `# `, for embedding in outputs.
    pub fn provenance(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.training.lr_backbone, c.training.lr_other, c.training.weight_decay), (4e-5, 4e-4, 1e-4));
        assert_eq!((c.training.loss_weights.giou, c.training.loss_weights.l1), (2.0, 5.0));
        assert_eq!(c.tau, 20.0);
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("model.depth", "2").unwrap();
        c.set("training.lr_other", "0.001").unwrap();
        c.set("inference.hanning", "false").unwrap();
        let text = c.to_text();
        let back = RunConfig::parse(&text, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn errors_name_the_field() {
        match RunConfig::parse("model.depth=four\n", "cfg") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.depth"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::parse("training.nope=1\n", "cfg") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "training.nope"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::parse("# comment\n\nnot a pair\n", "cfg") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
