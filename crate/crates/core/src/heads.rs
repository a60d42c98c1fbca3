//! Center prediction heads, reliability heads and output selection.
//!
//! Feature maps are kept channels-last as `[B·S·S, C]` matrices so a 3×3
//! convolution is an im2col gather followed by one matmul.

use crate::embedding::Modality;
use crate::numkernel::{truncated_normal, Bound, ParamId, ParamStore, ParamTag, Rng, Tape, Tensor, Var};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// Score maps are clamped away from 0 and 1 so the focal loss stays finite.
pub const SCORE_CLAMP: f64 = 1e-4;
/// Initial score logit bias, a 0.1 prior on every cell.
const SCORE_PRIOR_BIAS: f64 = -2.19;

/// Axis-aligned box given by center and size.
///
/// Predictions use normalized search-region coordinates; annotations and
/// tracker outputs use frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox { cx, cy, w, h }
    }

    /// From top-left corner and size.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox::from_xywh(x0, y0, x1 - x0, y1 - y0)
    }

    /// Top-left corner and size.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    /// `[x0, y0, x1, y1]`.
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }
}

/// Score, offset and size maps of one head for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMaps {
    /// `[S, S]`, entries in (0, 1).
    pub score: Tensor,
    /// `[S, S, 2]` as (x, y).
    pub offset: Tensor,
    /// `[S, S, 2]` as (w, h).
    pub size: Tensor,
}

impl PredictionMaps {
    pub fn side(&self) -> usize {
        self.score.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReliabilityScores {
    pub r_rgb: f64,
    pub r_t: f64,
    pub lambda_rgb: f64,
    pub lambda_t: f64,
}

impl ReliabilityScores {
    pub fn new(r_rgb: f64, r_t: f64) -> Self {
        let (lambda_rgb, lambda_t) = reliability_weights(r_rgb, r_t);
        ReliabilityScores { r_rgb, r_t, lambda_rgb, lambda_t }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackOutput {
    pub bbox: BoundingBox,
    pub chosen: Modality,
    pub reliability: ReliabilityScores,
    /// `[rgb head, thermal head]`.
    pub both: [BoundingBox; 2],
}

/// Two-way softmax of the reliability scores.
pub fn reliability_weights(r_rgb: f64, r_t: f64) -> (f64, f64) {
    let l_rgb = 1.0 / (1.0 + (r_t - r_rgb).exp());
    let l_t = 1.0 / (1.0 + (r_rgb - r_t).exp());
    (l_rgb, l_t)
}

/// Picks the box of the more reliable head; ties go to RGB.
pub fn select_output(rgb_box: BoundingBox, t_box: BoundingBox, scores: ReliabilityScores) -> TrackOutput {
    let chosen = if scores.r_rgb >= scores.r_t { Modality::Rgb } else { Modality::Thermal };
    TrackOutput {
        bbox: if chosen == Modality::Rgb { rgb_box } else { t_box },
        chosen,
        reliability: scores,
        both: [rgb_box, t_box],
    }
}

/// Side of the square grid holding `n` tokens.
pub fn grid_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s == 0 || s * s != n {
        return Err(Error::Shape { op: "grid_side", lhs: vec![n], rhs: vec![s, s] });
    }
    Ok(s)
}

/// Cosine window used as a multiplicative score penalty during tracking.
pub fn hann_window(side: usize) -> Tensor {
    let w: Vec<f64> = (1..=side)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (side + 1) as f64).cos()))
        .collect();
    let data = (0..side * side).map(|k| w[k / side] * w[k % side]).collect();
    Tensor::new(&[side, side], data).expect("window shape")
}

/// Decodes the argmax cell of the score map. Ties go to the smallest row-major index.
pub fn decode_box(maps: &PredictionMaps) -> BoundingBox {
    decode_box_windowed(maps, None)
}

/// [`decode_box`] with an optional multiplicative window on the score map.
pub fn decode_box_windowed(maps: &PredictionMaps, window: Option<&Tensor>) -> BoundingBox {
    let s = maps.side();
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &v) in maps.score.data().iter().enumerate() {
        let v = window.map_or(v, |w| v * w.data()[k]);
        if v > best.1 {
            best = (k, v);
        }
    }
    let (i, j) = (best.0 / s, best.0 % s);
    let off = &maps.offset.data()[best.0 * 2..best.0 * 2 + 2];
    let size = &maps.size.data()[best.0 * 2..best.0 * 2 + 2];
    let min = 1e-6;
    BoundingBox {
        cx: ((j as f64 + off[0]) / s as f64).clamp(0.0, 1.0),
        cy: ((i as f64 + off[1]) / s as f64).clamp(0.0, 1.0),
        w: size[0].clamp(min, 1.0),
        h: size[1].clamp(min, 1.0),
    }
}

/// Pending running-statistics updates collected during a training forward.
#[derive(Debug, Default)]
pub struct BnTrace {
    pending: Vec<(ParamId, ParamId, Var)>,
}

impl BnTrace {
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Folds the recorded batch statistics into the running buffers.
    pub fn apply(self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (mean_id, var_id, node) in self.pending {
            let rows = tape.value(node).rows();
            let (mean, var) = tape
                .batch_stats(node)
                .ok_or_else(|| Error::Contract("trace entry is not a batch norm node".into()))?;
            let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            let (mean, var) = (mean.to_vec(), var.to_vec());
            for (r, m) in store.value_mut(mean_id).data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.value_mut(var_id).data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }
}

/// Forward context shared by the head modules.
pub struct HeadPass<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    /// Batch statistics when set, running averages otherwise.
    pub train: bool,
    pub trace: &'a mut BnTrace,
}

/// im2col indices of a `k×k` convolution with `k/2` zero padding.
fn conv_indices(batch: usize, side: usize, k: usize, stride: usize) -> (Vec<Option<usize>>, usize) {
    let pad = k / 2;
    let out = (side + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(batch * out * out * k * k);
    for b in 0..batch {
        for oi in 0..out {
            for oj in 0..out {
                for di in 0..k {
                    for dj in 0..k {
                        let i = (oi * stride + di) as isize - pad as isize;
                        let j = (oj * stride + dj) as isize - pad as isize;
                        let inside = i >= 0 && j >= 0 && (i as usize) < side && (j as usize) < side;
                        idx.push(inside.then(|| b * side * side + i as usize * side + j as usize));
                    }
                }
            }
        }
    }
    (idx, out)
}

/// Bias-free convolution followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[kernel * kernel * in_channels, out_channels], INIT_STD),
            ParamTag::Other,
        );
        let gain = store.add(format!("{name}.bn_gain"), Tensor::ones(&[out_channels]), ParamTag::Other);
        let bias = store.add(format!("{name}.bn_bias"), Tensor::zeros(&[out_channels]), ParamTag::Other);
        let running_mean = store.add(format!("{name}.bn_mean"), Tensor::zeros(&[out_channels]), ParamTag::Buffer);
        let running_var = store.add(format!("{name}.bn_var"), Tensor::ones(&[out_channels]), ParamTag::Buffer);
        ConvBnRelu { weight, gain, bias, running_mean, running_var, kernel, stride, in_channels, out_channels }
    }

    /// Maps `[B·side², C_in]` to `[B·out², C_out]` and returns the new side.
    pub fn forward(&self, pass: &mut HeadPass, x: Var, batch: usize, side: usize) -> Result<(Var, usize)> {
        let (idx, out_side) = conv_indices(batch, side, self.kernel, self.stride);
        let cols = pass.tape.gather_rows(x, idx, self.kernel * self.kernel)?;
        let y = pass.tape.matmul(cols, pass.params.var(self.weight))?;
        let (g, b) = (pass.params.var(self.gain), pass.params.var(self.bias));
        let normed = if pass.train {
            let n = pass.tape.batch_norm(y, g, b, BN_EPS)?;
            pass.trace.pending.push((self.running_mean, self.running_var, n));
            n
        } else {
            let mean = pass.tape.value(pass.params.var(self.running_mean)).data().to_vec();
            let var = pass.tape.value(pass.params.var(self.running_var)).data();
            let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let c = self.out_channels;
            let scale = pass.tape.constant(Tensor::new(&[c], scale)?);
            let shift = pass.tape.constant(Tensor::new(&[c], shift)?);
            let y = pass.tape.mul_row(y, scale)?;
            let y = pass.tape.add_row(y, shift)?;
            let y = pass.tape.mul_row(y, g)?;
            pass.tape.add_row(y, b)?
        };
        Ok((pass.tape.relu(normed)?, out_side))
    }
}

/// Per-cell linear map, a 1×1 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, bias: f64) -> Self {
        Pointwise {
            weight: store.add(format!("{name}.weight"), truncated_normal(rng, &[cin, cout], INIT_STD), ParamTag::Other),
            bias: store.add(format!("{name}.bias"), Tensor::full(&[cout], bias), ParamTag::Other),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, params.var(self.weight))?;
        tape.add_row(y, params.var(self.bias))
    }
}

/// Four 3×3 Conv-BN-ReLU layers and a 1×1 output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub layers: Vec<ConvBnRelu>,
    pub out: Pointwise,
}

impl Branch {
    fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, in_channels: usize, width: usize, out: usize, bias: f64) -> Self {
        let w = |d: usize| (width / d).max(1);
        let schedule = [in_channels, w(2), w(4), w(8), w(8)];
        let layers = schedule
            .windows(2)
            .enumerate()
            .map(|(i, c)| ConvBnRelu::init(store, rng, &format!("{name}.conv{i}"), c[0], c[1], 3, 1))
            .collect();
        let out = Pointwise::init(store, rng, &format!("{name}.out"), schedule[4], out, bias);
        Branch { layers, out }
    }

    fn forward(&self, pass: &mut HeadPass, x: Var, batch: usize, side: usize) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(pass, h, batch, side)?.0;
        }
        self.out.forward(pass.tape, pass.params, h)
    }
}

/// Tape handles of a batched center-head forward.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[B·S², 1]`.
    pub score: Var,
    /// `[B·S², 2]`.
    pub offset: Var,
    /// `[B·S², 2]`.
    pub size: Var,
    pub batch: usize,
    pub side: usize,
}

impl HeadVars {
    /// Value-level maps of sample `b`.
    pub fn maps(&self, tape: &Tape, b: usize) -> Result<PredictionMaps> {
        let cells = self.side * self.side;
        let rows = b * cells..(b + 1) * cells;
        let s = self.side;
        Ok(PredictionMaps {
            score: tape.value(self.score).slice_rows(rows.clone())?.reshape(&[s, s])?,
            offset: tape.value(self.offset).slice_rows(rows.clone())?.reshape(&[s, s, 2])?,
            size: tape.value(self.size).slice_rows(rows)?.reshape(&[s, s, 2])?,
        })
    }
}

/// Score, offset and size branches over one search-region feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterHead {
    pub score: Branch,
    pub offset: Branch,
    pub size: Branch,
    pub in_channels: usize,
}

impl CenterHead {
    /// `width` sets the channel schedule `width/2, width/4, width/8, width/8`.
    pub fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, in_channels: usize, width: usize) -> Self {
        CenterHead {
            score: Branch::init(store, rng, &format!("{name}.score"), in_channels, width, 1, SCORE_PRIOR_BIAS),
            offset: Branch::init(store, rng, &format!("{name}.offset"), in_channels, width, 2, 0.0),
            size: Branch::init(store, rng, &format!("{name}.size"), in_channels, width, 2, 0.0),
            in_channels,
        }
    }

    /// `x` is `[B·N_x, C]`.
    pub fn forward(&self, pass: &mut HeadPass, x: Var, batch: usize) -> Result<HeadVars> {
        let side = batch_side(pass.tape, x, batch, self.in_channels)?;
        let s = self.score.forward(pass, x, batch, side)?;
        let score = pass.tape.sigmoid_clamped(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
        let o = self.offset.forward(pass, x, batch, side)?;
        let offset = pass.tape.sigmoid(o)?;
        let z = self.size.forward(pass, x, batch, side)?;
        let size = pass.tape.sigmoid(z)?;
        Ok(HeadVars { score, offset, size, batch, side })
    }
}

fn batch_side(tape: &Tape, x: Var, batch: usize, channels: usize) -> Result<usize> {
    let t = tape.value(x);
    if batch == 0 || !t.rows().is_multiple_of(batch) || t.cols() != channels {
        return Err(Error::shape("head input", t.shape(), &[batch, channels]));
    }
    grid_side(t.rows() / batch)
}

/// Three stride-2 Conv-BN-ReLU stages, global average pool and a linear score.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityHead {
    pub stages: Vec<ConvBnRelu>,
    pub out: Pointwise,
    pub in_channels: usize,
}

impl ReliabilityHead {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, in_channels: usize, width: usize) -> Self {
        let w = |d: usize| (width / d).max(1);
        let schedule = [in_channels, w(2), w(4), w(8)];
        let stages = schedule
            .windows(2)
            .enumerate()
            .map(|(i, c)| ConvBnRelu::init(store, rng, &format!("{name}.conv{i}"), c[0], c[1], 3, 2))
            .collect();
        let out = Pointwise::init(store, rng, &format!("{name}.out"), schedule[3], 1, 0.0);
        ReliabilityHead { stages, out, in_channels }
    }

    /// Returns `[B, 1]` reliability scores.
    pub fn forward(&self, pass: &mut HeadPass, x: Var, batch: usize) -> Result<Var> {
        let mut side = batch_side(pass.tape, x, batch, self.in_channels)?;
        let mut h = x;
        for st in &self.stages {
            (h, side) = st.forward(pass, h, batch, side)?;
        }
        let cells = side * side;
        let mut pool = vec![0.0; batch * batch * cells];
        for b in 0..batch {
            for c in 0..cells {
                pool[b * batch * cells + b * cells + c] = 1.0 / cells as f64;
            }
        }
        let pool = pass.tape.constant(Tensor::new(&[batch, batch * cells], pool)?);
        let pooled = pass.tape.matmul(pool, h)?;
        self.out.forward(pass.tape, pass.params, pooled)
    }
}

/// Inference-mode center head on one `[N_x, D]` feature map.
pub fn center_head_forward(features: &Tensor, head: &CenterHead, store: &ParamStore) -> Result<PredictionMaps> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let mut trace = BnTrace::default();
    let x = tape.constant(features.clone());
    let mut pass = HeadPass { tape: &mut tape, params: &params, train: false, trace: &mut trace };
    let vars = head.forward(&mut pass, x, 1)?;
    vars.maps(&tape, 0)
}

/// Inference-mode reliability score of one `[N_x, D]` feature map.
pub fn reliability_forward(features: &Tensor, head: &ReliabilityHead, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let mut trace = BnTrace::default();
    let x = tape.constant(features.clone());
    let mut pass = HeadPass { tape: &mut tape, params: &params, train: false, trace: &mut trace };
    let r = head.forward(&mut pass, x, 1)?;
    Ok(tape.value(r).data()[0])
}
