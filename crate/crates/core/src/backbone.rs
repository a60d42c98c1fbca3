//! The single transformer backbone.
//!
//! All four token streams are concatenated into one matrix and every encoder
//! layer runs one multi-head self-attention over the whole concatenation, with
//! no masking between segments. Per query segment, the attended output is the
//! sum of four block products `W^q_k · V^k`: same-stream aggregation, the
//! cross-modality term, and the two template terms. [`AttentionDecomposition`]
//! exposes those blocks and [`reconstruct_from_blocks`] rebuilds the output
//! from them.

use std::ops::Range;

use crate::embedding::{StreamId, TokenStream};
use crate::error::{Error, Result};
use crate::numkernel::{truncated_normal, Bound, ParamId, ParamStore, ParamTag, Rng, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-6;

/// Row layout of the joint token matrix `[x_rgb; x_t; z_rgb; z_t]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    counts: [usize; 4],
}

impl SegmentLayout {
    pub fn new(search_tokens: usize, template_tokens: usize) -> Self {
        SegmentLayout {
            counts: [search_tokens, search_tokens, template_tokens, template_tokens],
        }
    }

    /// Arbitrary per-segment counts, in [`StreamId::ALL`] order. Empty segments are allowed.
    pub fn from_counts(counts: [usize; 4]) -> Result<Self> {
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::Contract("layout has no tokens".into()));
        }
        Ok(SegmentLayout { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, s: StreamId) -> usize {
        self.counts[Self::slot(s)]
    }

    pub fn range(&self, s: StreamId) -> Range<usize> {
        let i = Self::slot(s);
        let start: usize = self.counts[..i].iter().sum();
        start..start + self.counts[i]
    }

    pub fn segments(&self) -> impl Iterator<Item = (StreamId, Range<usize>)> + '_ {
        StreamId::ALL.into_iter().map(|s| (s, self.range(s)))
    }

    fn slot(s: StreamId) -> usize {
        StreamId::ALL.iter().position(|&x| x == s).expect("known stream")
    }
}

/// The joint token matrix together with its segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTokenState {
    pub tokens: Tensor,
    pub layout: SegmentLayout,
}

impl JointTokenState {
    pub fn new(tokens: Tensor, layout: SegmentLayout) -> Result<Self> {
        if tokens.rows() != layout.total() || tokens.shape().len() != 2 {
            return Err(Error::shape("joint_state", tokens.shape(), &[layout.total()]));
        }
        Ok(JointTokenState { tokens, layout })
    }

    /// Concatenates the four streams in layout order.
    pub fn from_streams(streams: &[TokenStream; 4]) -> Result<Self> {
        for (s, expected) in streams.iter().zip(StreamId::ALL) {
            if s.stream != expected {
                return Err(Error::Contract(format!("stream {:?} where {:?} expected", s.stream, expected)));
            }
        }
        let layout = SegmentLayout::from_counts([
            streams[0].tokens.rows(),
            streams[1].tokens.rows(),
            streams[2].tokens.rows(),
            streams[3].tokens.rows(),
        ])?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = streams.iter().map(|s| tape.constant(s.tokens.clone())).collect();
        let h = tape.concat_rows(&vars)?;
        JointTokenState::new(tape.value(h).clone(), layout)
    }
}

/// One attention group: `queries` attend over the concatenation of `keys`.
/// Row ranges index the token matrix passed to [`EncoderLayer::attend`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Range<usize>,
    pub keys: Vec<Range<usize>>,
}

impl AttentionGroup {
    /// Self-attention within one contiguous block.
    pub fn within(rows: Range<usize>) -> Self {
        AttentionGroup {
            queries: rows.clone(),
            keys: vec![rows],
        }
    }
}

/// Softmaxed attention matrix and values of one head, captured for decomposition.
#[derive(Clone, Copy, Debug)]
pub struct HeadCapture {
    pub weights: Var,
    pub values: Var,
}

/// Parameter handles of one pre-norm encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_in: ParamId,
    pub mlp_in_bias: ParamId,
    pub mlp_out: ParamId,
    pub mlp_out_bias: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Contract(format!("{heads} heads do not divide dim {dim}")));
        }
        let hidden = dim * mlp_ratio;
        let mut w = |name: &str, shape: &[usize]| {
            store.add(format!("{prefix}.{name}"), truncated_normal(rng, shape, INIT_STD), ParamTag::Backbone)
        };
        let (wq, wk, wv, wo) = (w("wq", &[dim, dim]), w("wk", &[dim, dim]), w("wv", &[dim, dim]), w("wo", &[dim, dim]));
        let mlp_in = w("mlp_in", &[dim, hidden]);
        let mlp_out = w("mlp_out", &[hidden, dim]);
        let mut c = |name: &str, len: usize, v: f64| store.add(format!("{prefix}.{name}"), Tensor::full(&[len], v), ParamTag::Backbone);
        Ok(EncoderLayer {
            wq,
            bq: c("bq", dim, 0.0),
            wk,
            bk: c("bk", dim, 0.0),
            wv,
            bv: c("bv", dim, 0.0),
            wo,
            bo: c("bo", dim, 0.0),
            ln1_gain: c("ln1_gain", dim, 1.0),
            ln1_bias: c("ln1_bias", dim, 0.0),
            ln2_gain: c("ln2_gain", dim, 1.0),
            ln2_bias: c("ln2_bias", dim, 0.0),
            mlp_in,
            mlp_in_bias: c("mlp_in_bias", hidden, 0.0),
            mlp_out,
            mlp_out_bias: c("mlp_out_bias", dim, 0.0),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn linear(tape: &mut Tape, params: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = tape.matmul(x, params.var(w))?;
        tape.add_row(y, params.var(b))
    }

    /// Multi-head attention over `x` (before the output projection).
    ///
    /// Every group's queries attend over its key rows; query ranges must
    /// partition `0..rows(x)` in order. When `capture` is set, the first
    /// group's per-head weights and values are returned.
    pub fn attend(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        groups: &[AttentionGroup],
        capture: bool,
    ) -> Result<(Var, Vec<HeadCapture>)> {
        let rows = tape.value(x).rows();
        let mut next = 0;
        for g in groups {
            if g.queries.start != next || g.queries.is_empty() || g.keys.iter().all(|k| k.is_empty()) {
                return Err(Error::Contract("attention groups must partition the rows in order".into()));
            }
            next = g.queries.end;
        }
        if next != rows {
            return Err(Error::Contract(format!("attention groups cover {next} of {rows} rows")));
        }
        let q_all = Self::linear(tape, params, x, self.wq, self.bq)?;
        let k_all = Self::linear(tape, params, x, self.wk, self.bk)?;
        let v_all = Self::linear(tape, params, x, self.wv, self.bv)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut captured = Vec::new();
        let mut group_out = Vec::with_capacity(groups.len());
        for (gi, g) in groups.iter().enumerate() {
            let mut head_out = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let cols = h * dk..(h + 1) * dk;
                let q = tape.slice(q_all, g.queries.clone(), cols.clone())?;
                let mut ks = Vec::new();
                let mut vs = Vec::new();
                for kr in g.keys.iter().filter(|k| !k.is_empty()) {
                    ks.push(tape.slice(k_all, kr.clone(), cols.clone())?);
                    vs.push(tape.slice(v_all, kr.clone(), cols.clone())?);
                }
                let (k, v) = if ks.len() == 1 {
                    (ks[0], vs[0])
                } else {
                    (tape.concat_rows(&ks)?, tape.concat_rows(&vs)?)
                };
                let logits = tape.matmul_nt(q, k)?;
                let logits = tape.scale(logits, scale)?;
                let weights = tape.softmax_rows(logits)?;
                if capture && gi == 0 {
                    captured.push(HeadCapture { weights, values: v });
                }
                head_out.push(tape.matmul(weights, v)?);
            }
            group_out.push(if head_out.len() == 1 { head_out[0] } else { tape.concat_cols(&head_out)? });
        }
        let out = if group_out.len() == 1 { group_out[0] } else { tape.concat_rows(&group_out)? };
        Ok((out, captured))
    }

    /// Pre-norm residual block: `H += W_O·Attn(LN(H))`, then `H += MLP(LN(H))`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var, groups: &[AttentionGroup]) -> Result<Var> {
        let n1 = tape.layer_norm(x, params.var(self.ln1_gain), params.var(self.ln1_bias), LN_EPS)?;
        let (attn, _) = self.attend(tape, params, n1, groups, false)?;
        let proj = Self::linear(tape, params, attn, self.wo, self.bo)?;
        let x = tape.add(x, proj)?;
        let n2 = tape.layer_norm(x, params.var(self.ln2_gain), params.var(self.ln2_bias), LN_EPS)?;
        let hidden = Self::linear(tape, params, n2, self.mlp_in, self.mlp_in_bias)?;
        let hidden = tape.gelu(hidden)?;
        let out = Self::linear(tape, params, hidden, self.mlp_out, self.mlp_out_bias)?;
        tape.add(x, out)
    }
}

/// The `W^q_k` blocks of the row-softmaxed attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionDecomposition {
    pub layout: SegmentLayout,
    /// `per_head[h][q][k]`, `None` where either segment is empty.
    pub per_head: Vec<[[Option<Tensor>; 4]; 4]>,
}

impl AttentionDecomposition {
    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    /// Block `(query, key)` averaged over heads.
    pub fn block(&self, query: StreamId, key: StreamId) -> Option<Tensor> {
        let (qi, ki) = (slot(query), slot(key));
        let first = self.per_head.first()?[qi][ki].as_ref()?;
        let mut acc = first.clone();
        for h in &self.per_head[1..] {
            let b = h[qi][ki].as_ref().expect("heads share the layout");
            acc.data_mut().iter_mut().zip(b.data()).for_each(|(a, v)| *a += v);
        }
        let n = self.per_head.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }

    /// Mean entry of a head-averaged block: the share of attention mass a query
    /// token of `query` spends on one key token of `key`.
    pub fn mean_mass(&self, query: StreamId, key: StreamId) -> Option<f64> {
        self.block(query, key).map(|b| b.data().iter().sum::<f64>() / b.len() as f64)
    }

    /// Sum over all sixteen blocks of each query row, head `h`.
    pub fn row_sums(&self, h: usize) -> Vec<f64> {
        let mut sums = vec![0.0; self.layout.total()];
        for (qi, (_, qr)) in self.layout.segments().enumerate() {
            for ki in 0..4 {
                if let Some(b) = &self.per_head[h][qi][ki] {
                    for r in 0..b.rows() {
                        sums[qr.start + r] += b.row(r).iter().sum::<f64>();
                    }
                }
            }
        }
        sums
    }
}

fn slot(s: StreamId) -> usize {
    StreamId::ALL.iter().position(|&x| x == s).expect("known stream")
}

/// Result of [`joint_attention`].
#[derive(Clone, Debug)]
pub struct JointAttention {
    /// Attended output `A·V` before the output projection, `[rows, D]`.
    pub output: Tensor,
    pub decomposition: AttentionDecomposition,
    /// The value matrix split by segment, `[n_seg, D]` each.
    pub values: [Option<Tensor>; 4],
}

/// Multi-head self-attention over the whole joint token matrix (no layer norm,
/// no output projection), returning the block decomposition alongside.
pub fn joint_attention(state: &JointTokenState, layer: &EncoderLayer, store: &ParamStore) -> Result<JointAttention> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let x = tape.constant(state.tokens.clone());
    let rows = state.layout.total();
    let (out, captured) = layer.attend(&mut tape, &params, x, &[AttentionGroup::within(0..rows)], true)?;
    let v_all = EncoderLayer::linear(&mut tape, &params, x, layer.wv, layer.bv)?;
    let v_all = tape.value(v_all).clone();

    let per_head = captured
        .iter()
        .map(|c| {
            let a = tape.value(c.weights);
            let mut blocks: [[Option<Tensor>; 4]; 4] = Default::default();
            for (qi, (_, qr)) in state.layout.segments().enumerate() {
                for (ki, (_, kr)) in state.layout.segments().enumerate() {
                    if qr.is_empty() || kr.is_empty() {
                        continue;
                    }
                    let mut data = Vec::with_capacity(qr.len() * kr.len());
                    for r in qr.clone() {
                        data.extend_from_slice(&a.row(r)[kr.clone()]);
                    }
                    blocks[qi][ki] = Some(Tensor::new(&[qr.len(), kr.len()], data).expect("block shape"));
                }
            }
            blocks
        })
        .collect();
    let mut values: [Option<Tensor>; 4] = Default::default();
    for (i, (_, r)) in state.layout.segments().enumerate() {
        if !r.is_empty() {
            values[i] = Some(v_all.slice_rows(r)?);
        }
    }
    Ok(JointAttention {
        output: tape.value(out).clone(),
        decomposition: AttentionDecomposition {
            layout: state.layout,
            per_head,
        },
        values,
    })
}

/// Rebuilds the attended output from its blocks: for every query segment `q`
/// and head `h`, `Σ_k W^q_k(h) · V^k(h)`, heads concatenated along columns.
pub fn reconstruct_from_blocks(decomp: &AttentionDecomposition, values: &[Option<Tensor>; 4]) -> Result<Tensor> {
    let layout = decomp.layout;
    let heads = decomp.heads();
    let dim = values
        .iter()
        .flatten()
        .next()
        .map(Tensor::cols)
        .ok_or(Error::Empty("reconstruct_from_blocks"))?;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Contract("head count does not divide the value width".into()));
    }
    for (i, (_, r)) in layout.segments().enumerate() {
        let ok = match &values[i] {
            Some(v) => v.rows() == r.len() && v.cols() == dim,
            None => r.is_empty(),
        };
        if !ok {
            return Err(Error::Contract(format!("value segment {i} does not match the decomposition layout")));
        }
    }
    let dk = dim / heads;
    let mut out = vec![0.0; layout.total() * dim];
    for (h, blocks) in decomp.per_head.iter().enumerate() {
        for (qi, (_, qr)) in layout.segments().enumerate() {
            for (ki, (_, kr)) in layout.segments().enumerate() {
                let (Some(w), Some(v)) = (&blocks[qi][ki], &values[ki]) else { continue };
                if w.rows() != qr.len() || w.cols() != kr.len() {
                    return Err(Error::Contract("stale decomposition: block shape differs from layout".into()));
                }
                for r in 0..qr.len() {
                    let orow = &mut out[(qr.start + r) * dim + h * dk..(qr.start + r) * dim + (h + 1) * dk];
                    for (c, &wv) in w.row(r).iter().enumerate() {
                        let vrow = &v.row(c)[h * dk..(h + 1) * dk];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += wv * x);
                    }
                }
            }
        }
    }
    Tensor::new(&[layout.total(), dim], out)
}

/// Stacked encoder layers plus the final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<EncoderLayer>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub dim: usize,
}

impl Backbone {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Contract("backbone depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|i| EncoderLayer::init(store, rng, &format!("backbone.{i}"), dim, heads, mlp_ratio))
            .collect::<Result<_>>()?;
        let final_gain = store.add("backbone.norm_gain", Tensor::ones(&[dim]), ParamTag::Backbone);
        let final_bias = store.add("backbone.norm_bias", Tensor::zeros(&[dim]), ParamTag::Backbone);
        Ok(Backbone {
            layers,
            final_gain,
            final_bias,
            dim,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs every layer over a row-stack of `batch` joint matrices, each
    /// attending only within itself, then the final norm.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, h: Var, batch: usize) -> Result<Var> {
        let rows = tape.value(h).rows();
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::Contract(format!("{rows} rows do not split into {batch} samples")));
        }
        let t = rows / batch;
        let groups: Vec<AttentionGroup> = (0..batch).map(|b| AttentionGroup::within(b * t..(b + 1) * t)).collect();
        let mut x = h;
        for layer in &self.layers {
            x = layer.forward(tape, params, x, &groups)?;
        }
        tape.layer_norm(x, params.var(self.final_gain), params.var(self.final_bias), LN_EPS)
    }
}

/// Value-level single encoder layer.
pub fn encoder_layer(state: &JointTokenState, layer: &EncoderLayer, store: &ParamStore) -> Result<JointTokenState> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let x = tape.constant(state.tokens.clone());
    let y = layer.forward(&mut tape, &params, x, &[AttentionGroup::within(0..state.layout.total())])?;
    JointTokenState::new(tape.value(y).clone(), state.layout)
}

/// Value-level backbone pass: concatenates the streams, applies every layer and
/// the final norm, and returns the RGB and thermal search-region features.
pub fn backbone_forward(streams: &[TokenStream; 4], backbone: &Backbone, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let state = JointTokenState::from_streams(streams)?;
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let h = tape.constant(state.tokens.clone());
    let out = backbone.forward(&mut tape, &params, h, 1)?;
    let out = tape.value(out);
    Ok((
        out.slice_rows(state.layout.range(StreamId::SearchRgb))?,
        out.slice_rows(state.layout.range(StreamId::SearchThermal))?,
    ))
}

#[cfg(test)]
mod tests;
