//! Training pair sampling and the reliability-weighted training step.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::crop::{crop_search_at, crop_template, CropConfig};
use super::model::{BatchInput, HeadMode, Model};
use super::synthetic::{Degradation, Scene, SyntheticScenario};
use crate::embedding::ImagePair;
use crate::heads::{BnTrace, BoundingBox};
use crate::losses::{head_loss_tape, total_loss_tape, HeadLoss, HeadLossVars, LossBreakdown, LossWeights};
use crate::numkernel::{seeded, AdamW, Bound, Rng, Tape, Var};
use crate::{Error, Result};

/// How training pairs are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Curriculum {
    /// Probability that one modality of the search frame is degraded.
    pub degrade_prob: f64,
    /// Degradations drawn uniformly when one applies.
    pub kinds: Vec<Degradation>,
    /// Largest template-to-search frame gap.
    pub max_gap: usize,
    /// Search-center jitter as a fraction of the search window side.
    pub jitter: f64,
    pub frame_size: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum {
            degrade_prob: 0.5,
            kinds: vec![Degradation::Noise, Degradation::Noise, Degradation::Blank, Degradation::Dim],
            max_gap: 20,
            jitter: 0.1,
            frame_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub curriculum: Curriculum,
    pub crop: CropConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_backbone: 4e-5,
            lr_other: 4e-4,
            weight_decay: 1e-4,
            batch: 8,
            steps: 2000,
            loss_weights: LossWeights::default(),
            seed: 0,
            curriculum: Curriculum::default(),
            crop: CropConfig::default(),
        }
    }
}

/// One template/search pair with its normalized search-region ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub template: ImagePair,
    pub search: ImagePair,
    pub gt: BoundingBox,
}

/// Draws one pair from a fresh random scenario.
pub fn sample_pair(rng: &mut Rng, curriculum: &Curriculum, crop: &CropConfig) -> Result<TrainingSample> {
    let gap = rng.gen_range(1..=curriculum.max_gap.max(1));
    let mut scenario = SyntheticScenario::random(rng.gen(), gap + 1, curriculum.frame_size);
    if rng.gen_bool(curriculum.degrade_prob) {
        let kind = *curriculum.kinds.choose(rng).ok_or(Error::Empty("curriculum kinds"))?;
        scenario.schedule[gap][rng.gen_range(0..2)] = kind;
    }
    let scene = Scene::new(scenario)?;
    let (b0, b1) = (scene.trajectory()[0], scene.trajectory()[gap]);
    let (template, _) = crop_template(&scene.render(0)?, &b0, crop)?;
    let side = crop.search_factor * (b1.w * b1.h).sqrt();
    let j = curriculum.jitter * side;
    let (cx, cy) = (b1.cx + rng.gen_range(-j..=j), b1.cy + rng.gen_range(-j..=j));
    let (search, win) = crop_search_at(&scene.render(gap)?, cx, cy, &b1, crop)?;
    Ok(TrainingSample { template, search, gt: win.to_crop(&b1) })
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub l_rgb: f64,
    pub l_t: f64,
    pub lambda_rgb: f64,
    pub lambda_t: f64,
    pub total: f64,
}

impl CurvePoint {
    pub const HEADER: &'static str = "step,L_RGB,L_T,lambda_RGB,lambda_T,total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.l_rgb, self.l_t, self.lambda_rgb, self.lambda_t, self.total)
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = format!("{}\n", CurvePoint::HEADER);
    for p in curve {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// Training-mode forward plus the reliability-weighted objective. Returns the
/// scalar total and its batch-mean breakdown. Single-head variants use the
/// plain batch mean of their head loss.
pub fn objective(
    model: &Model,
    tape: &mut Tape,
    params: &Bound,
    batch: &[TrainingSample],
    w: LossWeights,
    trace: &mut BnTrace,
) -> Result<(Var, LossBreakdown)> {
    let pairs: Vec<(&ImagePair, &ImagePair)> = batch.iter().map(|s| (&s.template, &s.search)).collect();
    let gts: Vec<BoundingBox> = batch.iter().map(|s| s.gt).collect();
    let input = BatchInput::new(&pairs, model.config.patch)?;
    let out = model.forward(tape, params, &input, true, trace)?;
    let losses = out.heads.iter().map(|h| head_loss_tape(tape, h, &gts, w)).collect::<Result<Vec<_>>>()?;
    let summary = |tape: &Tape, l: &HeadLossVars| {
        HeadLoss::compose(batch_mean(tape, l.cls), batch_mean(tape, l.giou), batch_mean(tape, l.l1), w)
    };
    match out.reliability {
        Some((r_rgb, r_t)) => {
            let (total, lambda) = total_loss_tape(tape, losses[0].total, losses[1].total, r_rgb, r_t)?;
            let lam = tape.value(lambda);
            let n = lam.rows() as f64;
            let (lr, lt) = (0..lam.rows()).fold((0.0, 0.0), |acc, r| (acc.0 + lam.at(r, 0), acc.1 + lam.at(r, 1)));
            let b = LossBreakdown {
                rgb: summary(tape, &losses[0]),
                thermal: summary(tape, &losses[1]),
                total: tape.value(total).data()[0],
                lambda_rgb: lr / n,
                lambda_t: lt / n,
            };
            Ok((total, b))
        }
        None => {
            let total = tape.mean(losses[0].total)?;
            let head = summary(tape, &losses[0]);
            let (lambda_rgb, lambda_t) = match model.config.head_mode {
                HeadMode::RgbOnly => (1.0, 0.0),
                HeadMode::ThermalOnly => (0.0, 1.0),
                _ => (0.5, 0.5),
            };
            Ok((total, LossBreakdown { rgb: head, thermal: head, total: tape.value(total).data()[0], lambda_rgb, lambda_t }))
        }
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub opt: AdamW,
    pub data_rng: Rng,
    pub step: usize,
    pub curve: Vec<CurvePoint>,
}

fn batch_mean(tape: &Tape, v: Var) -> f64 {
    let d = tape.value(v).data();
    d.iter().sum::<f64>() / d.len() as f64
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let opt = AdamW::new(config.lr_backbone, config.lr_other, config.weight_decay);
        let data_rng = seeded(config.seed ^ 0xda7a_da7a);
        Trainer { model, config, opt, data_rng, step: 0, curve: Vec::new() }
    }

    pub fn sample_batch(&mut self) -> Result<Vec<TrainingSample>> {
        (0..self.config.batch)
            .map(|_| sample_pair(&mut self.data_rng, &self.config.curriculum, &self.config.crop))
            .collect()
    }

    /// Forward, losses, backward and one AdamW update on `batch`.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<LossBreakdown> {
        let step = self.step;
        let abort = |e: Error| Error::Training { step, reason: e.to_string() };
        let mut tape = Tape::new();
        let params = self.model.store.bind(&mut tape, true);
        let mut trace = BnTrace::default();
        let (total, breakdown) =
            objective(&self.model, &mut tape, &params, batch, self.config.loss_weights, &mut trace).map_err(abort)?;
        if !breakdown.total.is_finite() {
            return Err(abort(Error::NonFinite { op: "total loss" }));
        }
        tape.backward(total).map_err(abort)?;
        let grads = params.grads(&tape);
        self.opt.step(&mut self.model.store, &grads).map_err(abort)?;
        trace.apply(&tape, &mut self.model.store)?;
        self.curve.push(CurvePoint {
            step,
            l_rgb: breakdown.rgb.total,
            l_t: breakdown.thermal.total,
            lambda_rgb: breakdown.lambda_rgb,
            lambda_t: breakdown.lambda_t,
            total: breakdown.total,
        });
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs `steps` sampled steps, calling `on_step` after each.
    pub fn train(&mut self, steps: usize, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<()> {
        for _ in 0..steps {
            let batch = self.sample_batch()?;
            let b = self.train_step(&batch)?;
            on_step(self.step, &b);
        }
        Ok(())
    }
}
