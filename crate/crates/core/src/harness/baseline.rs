//! Three-stage extraction → fusion → relation baseline and the latency benchmark.
//!
//! The baseline shares the embedding and the encoder-layer kernels with the
//! unified model; only the attention topology differs. For depth `d` it runs
//! `d - 2` extraction phases, each applying a per-modality layer to the RGB and
//! then the thermal stream (template and search attend only within themselves),
//! one fusion phase where each region attends across both modalities, and one
//! relation phase over all tokens.

use std::time::Instant;

use super::model::{BatchInput, Model, ModelConfig};
use crate::backbone::{AttentionGroup, EncoderLayer};
use crate::embedding::{EmbeddingTables, ImagePair, StreamId};
use crate::numkernel::{seeded, Bound, ParamId, ParamStore, ParamTag, Tape, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ThreeStageBaseline {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbeddingTables,
    /// `[rgb, thermal]` extraction layers.
    pub extraction: [Vec<EncoderLayer>; 2],
    pub fusion: EncoderLayer,
    pub relation: EncoderLayer,
    final_gain: ParamId,
    final_bias: ParamId,
}

impl ThreeStageBaseline {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.depth < 3 {
            return Err(Error::Config { field: "model.depth".into(), msg: "the three-stage baseline needs depth ≥ 3".into() });
        }
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let embed =
            EmbeddingTables::init(&mut store, &mut rng, c.patch, c.dim, c.template_size, c.search_size, c.dual_embedding)?;
        let mut stage = |name: String| EncoderLayer::init(&mut store, &mut rng, &name, c.dim, c.heads, c.mlp_ratio);
        let extraction = [
            (0..c.depth - 2).map(|i| stage(format!("extract_rgb.{i}"))).collect::<Result<Vec<_>>>()?,
            (0..c.depth - 2).map(|i| stage(format!("extract_t.{i}"))).collect::<Result<Vec<_>>>()?,
        ];
        let fusion = stage("fusion".into())?;
        let relation = stage("relation".into())?;
        let final_gain = store.add("norm_gain", Tensor::ones(&[c.dim]), ParamTag::Backbone);
        let final_bias = store.add("norm_bias", Tensor::zeros(&[c.dim]), ParamTag::Backbone);
        Ok(ThreeStageBaseline { config, store, embed, extraction, fusion, relation, final_gain, final_bias })
    }

    /// Sequential attention phases: extraction phases, fusion, relation.
    pub fn phases(&self) -> usize {
        self.extraction[0].len() + 2
    }

    /// `[N_x, D]` RGB and thermal search features of one pair, like [`Model::features`].
    pub fn features(&self, tape: &mut Tape, params: &Bound, input: &BatchInput) -> Result<(Var, Var)> {
        if input.batch != 1 {
            return Err(Error::Contract("the three-stage baseline runs one pair at a time".into()));
        }
        let (nx, nz) = (self.config.search_tokens(), self.config.template_tokens());
        let mut streams = Vec::with_capacity(4);
        for (k, s) in StreamId::ALL.iter().enumerate() {
            let p = tape.constant(input.patches[k].clone());
            streams.push(self.embed.embed_stream(tape, params, *s, p, 1)?);
        }
        let separate = [AttentionGroup::within(0..nx), AttentionGroup::within(nx..nx + nz)];
        let mut per_modality = Vec::with_capacity(2);
        for (m, layers) in self.extraction.iter().enumerate() {
            let mut h = tape.concat_rows(&[streams[m], streams[m + 2]])?;
            for layer in layers {
                h = layer.forward(tape, params, h, &separate)?;
            }
            per_modality.push(h);
        }
        let [rgb, t] = [per_modality[0], per_modality[1]];
        let parts = [
            tape.slice_rows(rgb, 0..nx)?,
            tape.slice_rows(t, 0..nx)?,
            tape.slice_rows(rgb, nx..nx + nz)?,
            tape.slice_rows(t, nx..nx + nz)?,
        ];
        let joint = tape.concat_rows(&parts)?;
        let total = 2 * (nx + nz);
        let fused =
            self.fusion.forward(tape, params, joint, &[AttentionGroup::within(0..2 * nx), AttentionGroup::within(2 * nx..total)])?;
        let related = self.relation.forward(tape, params, fused, &[AttentionGroup::within(0..total)])?;
        let out = tape.layer_norm(related, params.var(self.final_gain), params.var(self.final_bias), LN_EPS)?;
        Ok((tape.slice_rows(out, 0..nx)?, tape.slice_rows(out, nx..2 * nx)?))
    }

    pub fn forward(&self, template: &ImagePair, search: &ImagePair) -> Result<(Tensor, Tensor)> {
        let input = BatchInput::new(&[(template, search)], self.config.patch)?;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let (a, b) = self.features(&mut tape, &params, &input)?;
        Ok((tape.value(a).clone(), tape.value(b).clone()))
    }
}

/// Unified single-pass search features of one pair.
pub fn unified_features(model: &Model, template: &ImagePair, search: &ImagePair) -> Result<(Tensor, Tensor)> {
    let input = BatchInput::new(&[(template, search)], model.config.patch)?;
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape, false);
    let (a, b) = model.features(&mut tape, &params, &input)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub config: String,
    pub search_tokens: usize,
    pub template_tokens: usize,
    pub unified_ms: f64,
    pub three_stage_ms: f64,
    /// `three_stage_ms / unified_ms`; above 1 when the unified pass is faster.
    pub ratio: f64,
    pub warmup: usize,
    pub samples: usize,
}

impl LatencyReport {
    pub const HEADER: &'static str = "config,search_tokens,template_tokens,unified_ms,three_stage_ms,ratio,warmup,samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{},{}",
            self.config,
            self.search_tokens,
            self.template_tokens,
            self.unified_ms,
            self.three_stage_ms,
            self.ratio,
            self.warmup,
            self.samples
        )
    }
}

pub fn latency_csv(reports: &[LatencyReport]) -> String {
    let mut s = format!("{}\n", LatencyReport::HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// `dim{D}-depth{L}-heads{H}` descriptor.
pub fn describe(c: &ModelConfig) -> String {
    format!("dim{}-depth{}-heads{}", c.dim, c.depth, c.heads)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_pair(c: &ModelConfig, size: usize, seed: u64) -> Result<ImagePair> {
    let mut rng = seeded(seed);
    let mut img = || crate::numkernel::uniform(&mut rng, &[size, size, 3], 0.0, 1.0);
    ImagePair::new(img(), img()).map_err(|e| Error::Contract(format!("{}: {e}", describe(c))))
}

/// Median wall-clock latency of both topologies on identical inputs. Timed
/// runs alternate between the two so drift affects both equally.
pub fn measure_latency(config: &ModelConfig, warmup: usize, samples: usize) -> Result<LatencyReport> {
    if samples == 0 {
        return Err(Error::Empty("latency samples"));
    }
    let unified = Model::new(config.clone(), 1)?;
    let staged = ThreeStageBaseline::new(config.clone(), 1)?;
    let template = random_pair(config, config.template_size, 2)?;
    let search = random_pair(config, config.search_size, 3)?;
    for _ in 0..warmup {
        unified_features(&unified, &template, &search)?;
        staged.forward(&template, &search)?;
    }
    let mut a = Vec::with_capacity(samples);
    let mut b = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = Instant::now();
        std::hint::black_box(unified_features(&unified, &template, &search)?);
        a.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        std::hint::black_box(staged.forward(&template, &search)?);
        b.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (unified_ms, three_stage_ms) = (median(&mut a), median(&mut b));
    Ok(LatencyReport {
        config: describe(config),
        search_tokens: config.search_tokens(),
        template_tokens: config.template_tokens(),
        unified_ms,
        three_stage_ms,
        ratio: three_stage_ms / unified_ms,
        warmup,
        samples,
    })
}

/// The three benchmark sizes, all at `N_x = 4·N_z`.
pub fn bench_sizes() -> Vec<ModelConfig> {
    [(32, 4, 2), (64, 4, 4), (128, 6, 8)]
        .into_iter()
        .map(|(dim, depth, heads)| ModelConfig { dim, depth, heads, ..ModelConfig::default() })
        .collect()
}
