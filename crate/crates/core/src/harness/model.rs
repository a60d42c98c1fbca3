//! The full tracker: dual embedding, joint backbone, heads and reliability heads.

use crate::backbone::Backbone;
use crate::embedding::{patchify, EmbeddingTables, ImagePair, StreamId};
use crate::heads::{
    decode_box_windowed, select_output, BnTrace, BoundingBox, CenterHead, HeadPass, HeadVars, PredictionMaps,
    ReliabilityHead, ReliabilityScores, TrackOutput,
};
use crate::numkernel::{seeded, Bound, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Which prediction heads sit on the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// One head per modality with reliability selection.
    Dual,
    RgbOnly,
    ThermalOnly,
    /// One head over channel-concatenated RGB and thermal features.
    Concat,
}

impl HeadMode {
    pub const ALL: [HeadMode; 4] = [HeadMode::Dual, HeadMode::RgbOnly, HeadMode::ThermalOnly, HeadMode::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Dual => "dual",
            HeadMode::RgbOnly => "rgb_only",
            HeadMode::ThermalOnly => "thermal_only",
            HeadMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        HeadMode::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Fixed reliability scores reported by single-head variants.
    fn fixed_scores(self) -> Option<(f64, f64)> {
        match self {
            HeadMode::Dual => None,
            HeadMode::RgbOnly => Some((1.0, 0.0)),
            HeadMode::ThermalOnly => Some((0.0, 1.0)),
            HeadMode::Concat => Some((0.0, 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub dual_embedding: bool,
    pub head_mode: HeadMode,
    /// Channel width the head schedules are derived from.
    pub head_width: usize,
    /// Stop reliability gradients at the backbone features.
    pub detach_reliability: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            template_size: 32,
            search_size: 64,
            dual_embedding: true,
            head_mode: HeadMode::Dual,
            head_width: 64,
            detach_reliability: false,
        }
    }
}

pub(crate) fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config { field: key.into(), msg: format!("cannot parse `{value}`") })
}

impl ModelConfig {
    pub fn template_tokens(&self) -> usize {
        (self.template_size / self.patch).pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        (self.search_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config { field: format!("model.{field}"), msg });
        if self.patch == 0 || !self.template_size.is_multiple_of(self.patch) || !self.search_size.is_multiple_of(self.patch) {
            return bad("patch", format!("{} must divide both crop sizes", self.patch));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("heads", format!("{} heads do not divide dim {}", self.heads, self.dim));
        }
        if self.depth == 0 {
            return bad("depth", "must be at least 1".into());
        }
        if self.head_width < 8 {
            return bad("head_width", "must be at least 8".into());
        }
        Ok(())
    }

    /// `key=value` entries, keys relative to the `model.` section.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("patch", self.patch.to_string()),
            ("dim", self.dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("template_size", self.template_size.to_string()),
            ("search_size", self.search_size.to_string()),
            ("dual_embedding", self.dual_embedding.to_string()),
            ("head_mode", self.head_mode.as_str().to_string()),
            ("head_width", self.head_width.to_string()),
            ("detach_reliability", self.detach_reliability.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let full = format!("model.{key}");
        match key {
            "patch" => self.patch = parse_field(&full, value)?,
            "dim" => self.dim = parse_field(&full, value)?,
            "depth" => self.depth = parse_field(&full, value)?,
            "heads" => self.heads = parse_field(&full, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_field(&full, value)?,
            "template_size" => self.template_size = parse_field(&full, value)?,
            "search_size" => self.search_size = parse_field(&full, value)?,
            "dual_embedding" => self.dual_embedding = parse_field(&full, value)?,
            "head_mode" => {
                self.head_mode = HeadMode::parse(value.trim())
                    .ok_or_else(|| Error::Config { field: full, msg: format!("unknown head mode `{value}`") })?
            }
            "head_width" => self.head_width = parse_field(&full, value)?,
            "detach_reliability" => self.detach_reliability = parse_field(&full, value)?,
            _ => return Err(Error::Config { field: full, msg: "unknown key".into() }),
        }
        Ok(())
    }
}

/// Patch matrices of a batch, stacked per stream in joint order.
#[derive(Clone, Debug)]
pub struct BatchInput {
    /// `[x_rgb, x_t, z_rgb, z_t]`, each `[B·N, 3P²]`.
    pub patches: [Tensor; 4],
    pub batch: usize,
}

impl BatchInput {
    pub fn new(pairs: &[(&ImagePair, &ImagePair)], patch: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut streams: [Vec<f64>; 4] = Default::default();
        let mut rows = [0usize; 4];
        let mut cols = 0;
        for (template, search) in pairs {
            for (k, s) in StreamId::ALL.iter().enumerate() {
                let img = if s.is_search() { search } else { template };
                let p = patchify(img.modality(s.modality()), patch)?;
                rows[k] += p.rows();
                cols = p.cols();
                streams[k].extend_from_slice(p.data());
            }
        }
        let mut it = streams.into_iter().zip(rows).map(|(d, r)| Tensor::new(&[r, cols], d));
        let patches = [it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?];
        Ok(BatchInput { patches, batch: pairs.len() })
    }
}

/// Tape outputs of a batched forward.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// One entry for single-head variants, `[rgb, thermal]` for dual.
    pub heads: Vec<HeadVars>,
    /// `[B, 1]` reliability scores of the dual variant.
    pub reliability: Option<(Var, Var)>,
    /// Search-region features `[B·N_x, D]` per modality.
    pub features: (Var, Var),
}

/// Head maps and reliability scores for one template/search pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub maps: Vec<PredictionMaps>,
    pub reliability: ReliabilityScores,
}

impl Inference {
    /// Decoded `[rgb, thermal]` boxes in normalized search coordinates. Single-head
    /// variants report the same box twice.
    pub fn boxes(&self, window: Option<&Tensor>) -> [BoundingBox; 2] {
        let a = decode_box_windowed(&self.maps[0], window);
        let b = self.maps.get(1).map_or(a, |m| decode_box_windowed(m, window));
        [a, b]
    }

    pub fn select(&self, window: Option<&Tensor>) -> TrackOutput {
        let [a, b] = self.boxes(window);
        select_output(a, b, self.reliability)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbeddingTables,
    pub backbone: Backbone,
    pub heads: Vec<CenterHead>,
    pub reliability: Vec<ReliabilityHead>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let c = &config;
        let embed =
            EmbeddingTables::init(&mut store, &mut rng, c.patch, c.dim, c.template_size, c.search_size, c.dual_embedding)?;
        let backbone = Backbone::init(&mut store, &mut rng, c.depth, c.dim, c.heads, c.mlp_ratio)?;
        let (heads, reliability) = match c.head_mode {
            HeadMode::Dual => (
                vec![
                    CenterHead::init(&mut store, &mut rng, "head_rgb", c.dim, c.head_width),
                    CenterHead::init(&mut store, &mut rng, "head_t", c.dim, c.head_width),
                ],
                vec![
                    ReliabilityHead::init(&mut store, &mut rng, "rel_rgb", c.dim, c.head_width),
                    ReliabilityHead::init(&mut store, &mut rng, "rel_t", c.dim, c.head_width),
                ],
            ),
            HeadMode::RgbOnly | HeadMode::ThermalOnly => {
                (vec![CenterHead::init(&mut store, &mut rng, "head", c.dim, c.head_width)], vec![])
            }
            HeadMode::Concat => (vec![CenterHead::init(&mut store, &mut rng, "head", 2 * c.dim, c.head_width)], vec![]),
        };
        Ok(Model { config, store, embed, backbone, heads, reliability })
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.store.trainable_scalars()
    }

    /// Embeds, interleaves per sample into joint matrices, and runs the backbone.
    /// Returns the `[B·N_x, D]` RGB and thermal search features.
    pub fn features(&self, tape: &mut Tape, params: &Bound, input: &BatchInput) -> Result<(Var, Var)> {
        let b = input.batch;
        let (nx, nz) = (self.config.search_tokens(), self.config.template_tokens());
        let mut streams = Vec::with_capacity(4);
        for (k, s) in StreamId::ALL.iter().enumerate() {
            let p = tape.constant(input.patches[k].clone());
            streams.push(self.embed.embed_stream(tape, params, *s, p, b)?);
        }
        let all = tape.concat_rows(&streams)?;
        let t = 2 * (nx + nz);
        let h = if b == 1 {
            all
        } else {
            let offsets = [0, b * nx, 2 * b * nx, 2 * b * nx + b * nz];
            let counts = [nx, nx, nz, nz];
            let idx = (0..b)
                .flat_map(|s| (0..4).flat_map(move |k| (0..counts[k]).map(move |r| Some(offsets[k] + s * counts[k] + r))))
                .collect();
            tape.gather_rows(all, idx, 1)?
        };
        let out = self.backbone.forward(tape, params, h, b)?;
        let pick = |tape: &mut Tape, start: usize| -> Result<Var> {
            if b == 1 {
                tape.slice_rows(out, start..start + nx)
            } else {
                let idx = (0..b).flat_map(|s| (0..nx).map(move |r| Some(s * t + start + r))).collect();
                tape.gather_rows(out, idx, 1)
            }
        };
        Ok((pick(tape, 0)?, pick(tape, nx)?))
    }

    /// Batched forward through every head.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, input: &BatchInput, train: bool, trace: &mut BnTrace) -> Result<ForwardVars> {
        let b = input.batch;
        let (x_rgb, x_t) = self.features(tape, params, input)?;
        let mut pass = HeadPass { tape, params, train, trace };
        let heads = match self.config.head_mode {
            HeadMode::Dual => vec![self.heads[0].forward(&mut pass, x_rgb, b)?, self.heads[1].forward(&mut pass, x_t, b)?],
            HeadMode::RgbOnly => vec![self.heads[0].forward(&mut pass, x_rgb, b)?],
            HeadMode::ThermalOnly => vec![self.heads[0].forward(&mut pass, x_t, b)?],
            HeadMode::Concat => {
                let both = pass.tape.concat_cols(&[x_rgb, x_t])?;
                vec![self.heads[0].forward(&mut pass, both, b)?]
            }
        };
        let reliability = if self.config.head_mode == HeadMode::Dual {
            let (fr, ft) = if self.config.detach_reliability {
                (pass.tape.detach(x_rgb), pass.tape.detach(x_t))
            } else {
                (x_rgb, x_t)
            };
            Some((self.reliability[0].forward(&mut pass, fr, b)?, self.reliability[1].forward(&mut pass, ft, b)?))
        } else {
            None
        };
        Ok(ForwardVars { heads, reliability, features: (x_rgb, x_t) })
    }

    /// Inference-mode forward for a batch of template/search pairs.
    pub fn infer_batch(&self, pairs: &[(&ImagePair, &ImagePair)]) -> Result<Vec<Inference>> {
        let input = BatchInput::new(pairs, self.config.patch)?;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let mut trace = BnTrace::default();
        let out = self.forward(&mut tape, &params, &input, false, &mut trace)?;
        (0..input.batch)
            .map(|k| {
                let maps = out.heads.iter().map(|h| h.maps(&tape, k)).collect::<Result<Vec<_>>>()?;
                let (r_rgb, r_t) = match (out.reliability, self.config.head_mode.fixed_scores()) {
                    (Some((a, b)), _) => (tape.value(a).data()[k], tape.value(b).data()[k]),
                    (None, Some(fixed)) => fixed,
                    (None, None) => unreachable!("dual models always have reliability heads"),
                };
                Ok(Inference { maps, reliability: ReliabilityScores::new(r_rgb, r_t) })
            })
            .collect()
    }

    pub fn infer(&self, template: &ImagePair, search: &ImagePair) -> Result<Inference> {
        Ok(self.infer_batch(&[(template, search)])?.remove(0))
    }
}
