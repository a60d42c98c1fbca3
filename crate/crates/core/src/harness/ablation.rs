//! Ablation arms trained under one seed and budget, scored on a held-out set.

use super::model::{HeadMode, Model, ModelConfig};
use super::synthetic::{generate_sequence, noise_span_scenario, Degradation, Schedule, Scene};
use super::track::{track_sequences, TrackOptions};
use super::train::{TrainConfig, Trainer};
use crate::embedding::{ImagePair, Modality};
use crate::heads::{BoundingBox, TrackOutput};
use crate::metrics::{aggregate, evaluate, EvalReport, FrameAnnotation, DEFAULT_TAU};
use crate::{Error, Result};

/// One held-out sequence with its degradation schedule.
#[derive(Clone, Debug)]
pub struct HeldOutSequence {
    pub frames: Vec<ImagePair>,
    pub annotations: Vec<FrameAnnotation>,
    pub schedule: Schedule,
    pub init: BoundingBox,
}

/// Sequences with one contiguous single-modality noise span each.
pub fn held_out_set(seed: u64, count: usize, frames: usize, size: usize) -> Result<Vec<HeldOutSequence>> {
    (0..count as u64)
        .map(|k| {
            let s = noise_span_scenario(seed.wrapping_add(k * 7919), frames, size);
            let (frames, annotations) = generate_sequence(&s)?;
            let init = Scene::new(s.clone())?.trajectory()[0];
            Ok(HeldOutSequence { frames, annotations, schedule: s.schedule, init })
        })
        .collect()
}

/// The clean modality of a frame where exactly one modality is degraded.
fn clean_modality(frame: &[Degradation; 2]) -> Option<Modality> {
    match (frame[0] == Degradation::Clean, frame[1] == Degradation::Clean) {
        (true, false) => Some(Modality::Rgb),
        (false, true) => Some(Modality::Thermal),
        _ => None,
    }
}

/// Held-out scores of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutScore {
    pub report: EvalReport,
    /// Fraction of single-modality-degraded frames whose chosen head is the clean one.
    pub selection: f64,
    pub degraded_frames: usize,
}

/// Fraction of degraded frames where the chosen modality is the clean one.
pub fn selection_efficacy(outputs: &[Vec<TrackOutput>], set: &[HeldOutSequence]) -> (f64, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (out, seq) in outputs.iter().zip(set) {
        for (o, sched) in out.iter().zip(&seq.schedule) {
            if let Some(clean) = clean_modality(sched) {
                total += 1;
                hits += usize::from(o.chosen == clean);
            }
        }
    }
    (if total == 0 { 0.0 } else { hits as f64 / total as f64 }, total)
}

pub fn score_model(model: &Model, set: &[HeldOutSequence], opts: &TrackOptions, tau: f64) -> Result<HeldOutScore> {
    let seqs: Vec<(&[ImagePair], BoundingBox)> = set.iter().map(|s| (s.frames.as_slice(), s.init)).collect();
    let outputs = track_sequences(model, &seqs, opts)?;
    let reports = outputs
        .iter()
        .zip(set)
        .map(|(out, seq)| {
            let boxes: Vec<BoundingBox> = out.iter().map(|o| o.bbox).collect();
            evaluate(&boxes, &seq.annotations, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    let (selection, degraded_frames) = selection_efficacy(&outputs, set);
    Ok(HeldOutScore { report: aggregate(&reports)?, selection, degraded_frames })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Embedding,
    Heads,
}

impl AblationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "embedding" => Some(AblationKind::Embedding),
            "heads" => Some(AblationKind::Heads),
            _ => None,
        }
    }

    /// Arm names and their model configs derived from `base`.
    pub fn arms(self, base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationKind::Embedding => vec![
                ("single_embedding", with(&|c| c.dual_embedding = false)),
                ("dual_embedding", with(&|c| c.dual_embedding = true)),
            ],
            AblationKind::Heads => vec![
                ("rgb_only", with(&|c| c.head_mode = HeadMode::RgbOnly)),
                ("thermal_only", with(&|c| c.head_mode = HeadMode::ThermalOnly)),
                ("concat", with(&|c| c.head_mode = HeadMode::Concat)),
                ("dual_selection", with(&|c| c.head_mode = HeadMode::Dual)),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub eval_seed: u64,
    pub eval_sequences: usize,
    pub eval_frames: usize,
    pub frame_size: usize,
    pub track: TrackOptions,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_seed: 7,
            eval_seed: 1_000_003,
            eval_sequences: 20,
            eval_frames: 60,
            frame_size: 128,
            track: TrackOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub params: usize,
    pub steps: usize,
    /// Mean total loss over the last tenth of training.
    pub final_loss: f64,
    pub score: HeldOutScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<ArmResult>,
}

impl AblationTable {
    pub const HEADER: &'static str = "arm,params,steps,final_loss,PR,SR,MPR,MSR,selection,degraded_frames";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let e = &r.score.report;
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.arm, r.params, r.steps, r.final_loss, e.pr, e.sr, e.mpr, e.msr, r.score.selection, r.score.degraded_frames
            ));
        }
        s
    }

    pub fn row(&self, arm: &str) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.arm == arm)
    }
}

/// Trains one arm from scratch and scores it.
pub fn run_arm(
    name: &str,
    model: ModelConfig,
    cfg: &AblationConfig,
    set: &[HeldOutSequence],
    on_step: &mut dyn FnMut(&str, usize, f64),
) -> Result<(ArmResult, Model)> {
    let mut trainer = Trainer::new(Model::new(model, cfg.model_seed)?, cfg.train.clone());
    trainer.train(cfg.train.steps, |step, b| on_step(name, step, b.total))?;
    let tail = (trainer.curve.len() / 10).max(1);
    let recent = &trainer.curve[trainer.curve.len().saturating_sub(tail)..];
    if recent.is_empty() {
        return Err(Error::Empty("training curve"));
    }
    let final_loss = recent.iter().map(|p| p.total).sum::<f64>() / recent.len() as f64;
    let score = score_model(&trainer.model, set, &cfg.track, DEFAULT_TAU)?;
    let row = ArmResult {
        arm: name.to_string(),
        params: trainer.model.param_count(),
        steps: trainer.step,
        final_loss,
        score,
    };
    Ok((row, trainer.model))
}

pub fn run_ablation(kind: AblationKind, cfg: &AblationConfig, on_step: &mut dyn FnMut(&str, usize, f64)) -> Result<AblationTable> {
    let set = held_out_set(cfg.eval_seed, cfg.eval_sequences, cfg.eval_frames, cfg.frame_size)?;
    let rows = kind
        .arms(&cfg.model)
        .into_iter()
        .map(|(name, model)| Ok(run_arm(name, model, cfg, &set, on_step)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { kind, rows })
}
