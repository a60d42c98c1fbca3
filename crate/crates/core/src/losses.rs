//! Per-head tracking losses and the reliability-weighted total.

use crate::heads::{reliability_weights, BoundingBox, HeadVars, PredictionMaps};
use crate::numkernel::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Box-term weights of a head loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { giou: 2.0, l1: 5.0 }
    }
}

impl LossWeights {
    pub fn new(giou: f64, l1: f64) -> Result<Self> {
        if !(giou >= 0.0 && l1 >= 0.0) {
            return Err(Error::Domain(format!("loss weights must be non-negative, got ({giou}, {l1})")));
        }
        Ok(LossWeights { giou, l1 })
    }
}

/// Loss terms of one head.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadLoss {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
}

impl HeadLoss {
    pub fn compose(cls: f64, giou: f64, l1: f64, w: LossWeights) -> Self {
        HeadLoss { cls, giou, l1, total: cls + w.giou * giou + w.l1 * l1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rgb: HeadLoss,
    pub thermal: HeadLoss,
    pub total: f64,
    pub lambda_rgb: f64,
    pub lambda_t: f64,
}

/// Grid cell `(row, col)` holding the box center.
pub fn center_cell(b: &BoundingBox, side: usize) -> (usize, usize) {
    let cell = |v: f64| ((v * side as f64).floor().max(0.0) as usize).min(side - 1);
    (cell(b.cy), cell(b.cx))
}

/// Gaussian heatmap with peak 1 at the center cell of `gt` and σ of one sixth
/// of the box extent per axis, at least half a cell.
pub fn gaussian_target(gt: &BoundingBox, side: usize) -> Tensor {
    let (ci, cj) = center_cell(gt, side);
    let sx = (gt.w * side as f64 / 6.0).max(0.5);
    let sy = (gt.h * side as f64 / 6.0).max(0.5);
    let data = (0..side * side)
        .map(|k| {
            let (dy, dx) = ((k / side) as f64 - ci as f64, (k % side) as f64 - cj as f64);
            (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp()
        })
        .collect();
    Tensor::new(&[side, side], data).expect("square target")
}

/// Penalty-reduced focal loss of one score map.
pub fn focal_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone().reshape(&[1, pred.len()])?);
    let t = tape.constant(target.clone().reshape(&[1, target.len()])?);
    let l = tape.focal_loss(p, t)?;
    Ok(tape.value(l).data()[0])
}

/// Mean absolute difference over `(cx, cy, w, h)`.
pub fn l1_box_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    ((pred.cx - gt.cx).abs() + (pred.cy - gt.cy).abs() + (pred.w - gt.w).abs() + (pred.h - gt.h).abs()) / 4.0
}

/// `1 − GIoU`, in `[0, 2)`.
pub fn giou_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    if !pred.is_valid() || !gt.is_valid() {
        return Err(Error::Domain(format!("degenerate box in giou: {pred:?} vs {gt:?}")));
    }
    let [a0, a1, a2, a3] = pred.corners();
    let [b0, b1, b2, b3] = gt.corners();
    let inter = (a2.min(b2) - a0.max(b0)).max(0.0) * (a3.min(b3) - a1.max(b1)).max(0.0);
    let union = pred.area() + gt.area() - inter;
    let hull = (a2.max(b2) - a0.min(b0)) * (a3.max(b3) - a1.min(b1));
    Ok(1.0 - (inter / union - (hull - union) / hull))
}

/// Box predicted at the ground-truth center cell.
pub fn box_at_cell(maps: &PredictionMaps, cell: (usize, usize)) -> BoundingBox {
    let s = maps.side();
    let k = cell.0 * s + cell.1;
    let (o, z) = (&maps.offset.data()[2 * k..2 * k + 2], &maps.size.data()[2 * k..2 * k + 2]);
    BoundingBox::new((cell.1 as f64 + o[0]) / s as f64, (cell.0 as f64 + o[1]) / s as f64, z[0], z[1])
}

/// Focal + weighted GIoU + weighted L1 of one head against a normalized gt box.
pub fn head_loss(maps: &PredictionMaps, gt: &BoundingBox, w: LossWeights) -> Result<HeadLoss> {
    let s = maps.side();
    let cls = focal_loss(&maps.score, &gaussian_target(gt, s))?;
    let pred = box_at_cell(maps, center_cell(gt, s));
    Ok(HeadLoss::compose(cls, giou_loss(&pred, gt)?, l1_box_loss(&pred, gt), w))
}

/// `λ_RGB·L_RGB + λ_T·L_T` with softmax weights of the reliability scores.
pub fn total_loss(l_rgb: f64, l_t: f64, r_rgb: f64, r_t: f64) -> (f64, f64, f64) {
    let (a, b) = reliability_weights(r_rgb, r_t);
    (a * l_rgb + b * l_t, a, b)
}

/// Per-sample loss terms on the tape, each `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadLossVars {
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
    pub total: Var,
}

/// Batched [`head_loss`] on the tape for normalized gt boxes, one per sample.
pub fn head_loss_tape(tape: &mut Tape, head: &HeadVars, gts: &[BoundingBox], w: LossWeights) -> Result<HeadLossVars> {
    let (b, s) = (head.batch, head.side);
    if gts.len() != b {
        return Err(Error::shape("head_loss_tape", &[gts.len()], &[b]));
    }
    let cells = s * s;
    let mut target = Vec::with_capacity(b * cells);
    let mut idx = Vec::with_capacity(b);
    let mut origin = Vec::with_capacity(2 * b);
    let mut gt_lo = Vec::with_capacity(2 * b);
    let mut gt_hi = Vec::with_capacity(2 * b);
    let mut gt_all = Vec::with_capacity(4 * b);
    let mut gt_area = Vec::with_capacity(b);
    for (k, g) in gts.iter().enumerate() {
        if !g.is_valid() {
            return Err(Error::Domain(format!("degenerate gt box {g:?}")));
        }
        target.extend_from_slice(gaussian_target(g, s).data());
        let (i, j) = center_cell(g, s);
        idx.push(Some(k * cells + i * s + j));
        origin.extend([j as f64, i as f64]);
        let c = g.corners();
        gt_lo.extend([c[0], c[1]]);
        gt_hi.extend([c[2], c[3]]);
        gt_all.extend([g.cx, g.cy, g.w, g.h]);
        gt_area.push(g.area());
    }
    let mut c = |shape: &[usize], v: Vec<f64>| -> Result<Var> { Ok(tape.constant(Tensor::new(shape, v)?)) };
    let target = c(&[b, cells], target)?;
    let origin = c(&[b, 2], origin)?;
    let gt_lo = c(&[b, 2], gt_lo)?;
    let gt_hi = c(&[b, 2], gt_hi)?;
    let gt_all = c(&[b, 4], gt_all)?;
    let gt_area = c(&[b, 1], gt_area)?;
    let zeros = c(&[b, 1], vec![0.0; b])?;

    let score = tape.reshape(head.score, &[b, cells])?;
    let cls = tape.focal_loss(score, target)?;

    let off = tape.gather_rows(head.offset, idx.clone(), 1)?;
    let size = tape.gather_rows(head.size, idx, 1)?;
    let center = tape.add(off, origin)?;
    let center = tape.scale(center, 1.0 / s as f64)?;

    let pred = tape.concat_cols(&[center, size])?;
    let diff = tape.sub(pred, gt_all)?;
    let diff = tape.abs(diff)?;
    let l1 = tape.row_sum(diff)?;
    let l1 = tape.scale(l1, 0.25)?;

    let half = tape.scale(size, 0.5)?;
    let lo = tape.sub(center, half)?;
    let hi = tape.add(center, half)?;
    let area = |tape: &mut Tape, lo: Var, hi: Var, clamp: bool| -> Result<Var> {
        let wh = tape.sub(hi, lo)?;
        let w = tape.slice_cols(wh, 0..1)?;
        let h = tape.slice_cols(wh, 1..2)?;
        let (w, h) = if clamp { (tape.maximum(w, zeros)?, tape.maximum(h, zeros)?) } else { (w, h) };
        tape.mul(w, h)
    };
    let in_lo = tape.maximum(lo, gt_lo)?;
    let in_hi = tape.minimum(hi, gt_hi)?;
    let inter = area(tape, in_lo, in_hi, true)?;
    let pred_area = area(tape, lo, hi, false)?;
    let union = tape.add(pred_area, gt_area)?;
    let union = tape.sub(union, inter)?;
    let hull_lo = tape.minimum(lo, gt_lo)?;
    let hull_hi = tape.maximum(hi, gt_hi)?;
    let hull = area(tape, hull_lo, hull_hi, false)?;
    let iou = tape.div(inter, union)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let giou = tape.sub(iou, penalty)?;
    let giou = tape.scale(giou, -1.0)?;
    let giou = tape.add_scalar(giou, 1.0)?;

    let g = tape.scale(giou, w.giou)?;
    let l = tape.scale(l1, w.l1)?;
    let total = tape.add(cls, g)?;
    let total = tape.add(total, l)?;
    Ok(HeadLossVars { cls, giou, l1, total })
}

/// Batch mean of the reliability-weighted head losses.
///
/// `r_rgb`, `r_t`, `l_rgb`, `l_t` are `[B, 1]`. Returns the scalar total and
/// the `[B, 2]` softmax weights.
pub fn total_loss_tape(tape: &mut Tape, l_rgb: Var, l_t: Var, r_rgb: Var, r_t: Var) -> Result<(Var, Var)> {
    let r = tape.concat_cols(&[r_rgb, r_t])?;
    let lambda = tape.softmax_rows(r)?;
    let l = tape.concat_cols(&[l_rgb, l_t])?;
    let weighted = tape.mul(lambda, l)?;
    let per_sample = tape.row_sum(weighted)?;
    Ok((tape.mean(per_sample)?, lambda))
}
