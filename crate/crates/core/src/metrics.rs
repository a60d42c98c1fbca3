//! Precision, success and their max-over-modality variants.

use std::fmt::Write as _;

use crate::heads::BoundingBox;
use crate::{Error, Result};

/// Default center-distance threshold in pixels.
pub const DEFAULT_TAU: f64 = 20.0;
/// Largest distance threshold of the precision curve.
pub const PRECISION_CURVE_MAX: usize = 50;
/// Number of overlap thresholds `0, 0.05, …, 1`.
pub const SUCCESS_STEPS: usize = 21;

/// Per-frame ground truth in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameAnnotation {
    pub rgb: Option<BoundingBox>,
    pub thermal: Option<BoundingBox>,
    /// Target present.
    pub valid: bool,
}

impl FrameAnnotation {
    pub fn new(rgb: Option<BoundingBox>, thermal: Option<BoundingBox>) -> Self {
        FrameAnnotation { rgb, thermal, valid: rgb.is_some() || thermal.is_some() }
    }

    /// Same box for both modalities.
    pub fn aligned(b: BoundingBox) -> Self {
        FrameAnnotation::new(Some(b), Some(b))
    }

    /// Ground truth for single-reference metrics: RGB, else thermal.
    pub fn reference(&self) -> Option<BoundingBox> {
        self.rgb.or(self.thermal)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Domain(format!("degenerate box in iou: {a:?} vs {b:?}")));
    }
    let [a0, a1, a2, a3] = a.corners();
    let [b0, b1, b2, b3] = b.corners();
    let inter = (a2.min(b2) - a0.max(b0)).max(0.0) * (a3.min(b3) - a1.max(b1)).max(0.0);
    Ok(inter / (a.area() + b.area() - inter))
}

/// Euclidean distance between box centers.
pub fn center_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Fraction of errors strictly below `tau`.
pub fn precision_rate(errors: &[f64], tau: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("precision_rate"));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    Ok(errors.iter().filter(|&&e| e < tau).count() as f64 / errors.len() as f64)
}

pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_STEPS).map(|i| i as f64 / (SUCCESS_STEPS - 1) as f64).collect()
}

/// Success curve (fraction with IoU strictly above each threshold) and its mean.
pub fn success_rate(ious: &[f64]) -> Result<(f64, Vec<f64>)> {
    if ious.is_empty() {
        return Err(Error::Empty("success_rate"));
    }
    let n = ious.len();
    let counts: Vec<usize> = success_thresholds().into_iter().map(|t| ious.iter().filter(|&&v| v > t).count()).collect();
    // one division of the total count keeps SR the correctly rounded rational
    let sr = counts.iter().sum::<usize>() as f64 / (counts.len() * n) as f64;
    Ok((sr, counts.into_iter().map(|c| c as f64 / n as f64).collect()))
}

fn check_lengths(pred: &[BoundingBox], ann: &[FrameAnnotation]) -> Result<()> {
    if pred.len() != ann.len() {
        return Err(Error::Contract(format!("{} predictions for {} annotated frames", pred.len(), ann.len())));
    }
    Ok(())
}

/// Per valid frame: minimum center error and maximum IoU over the present ground truths.
pub fn best_of_modalities(pred: &[BoundingBox], ann: &[FrameAnnotation]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(pred, ann)?;
    let (mut errors, mut overlaps) = (Vec::new(), Vec::new());
    for (p, a) in pred.iter().zip(ann).filter(|(_, a)| a.valid) {
        let gts: Vec<&BoundingBox> = a.rgb.iter().chain(a.thermal.iter()).collect();
        errors.push(gts.iter().map(|g| center_error(p, g)).fold(f64::INFINITY, f64::min));
        let mut best = 0.0f64;
        for g in gts {
            best = best.max(iou(p, g)?);
        }
        overlaps.push(best);
    }
    Ok((errors, overlaps))
}

/// Maximum precision rate at `tau` and maximum success rate.
pub fn mpr_msr(pred: &[BoundingBox], ann: &[FrameAnnotation], tau: f64) -> Result<(f64, f64)> {
    let (errors, overlaps) = best_of_modalities(pred, ann)?;
    Ok((precision_rate(&errors, tau)?, success_rate(&overlaps)?.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pr: f64,
    pub sr: f64,
    pub mpr: f64,
    pub msr: f64,
    pub tau: f64,
    /// `(threshold px, fraction below)` for thresholds `0..=50` plus `tau`.
    pub precision_curve: Vec<(f64, f64)>,
    /// `(overlap threshold, fraction above)`.
    pub success_curve: Vec<(f64, f64)>,
    pub frame_count: usize,
}

fn precision_thresholds(tau: f64) -> Vec<f64> {
    let mut t: Vec<f64> = (0..=PRECISION_CURVE_MAX).map(|v| v as f64).collect();
    if !t.contains(&tau) {
        t.push(tau);
        t.sort_by(f64::total_cmp);
    }
    t
}

/// PR/SR against each frame's reference ground truth and MPR/MSR over both.
/// Invalid frames are skipped.
pub fn evaluate(pred: &[BoundingBox], ann: &[FrameAnnotation], tau: f64) -> Result<EvalReport> {
    check_lengths(pred, ann)?;
    let (mut errors, mut overlaps) = (Vec::new(), Vec::new());
    for (p, a) in pred.iter().zip(ann) {
        if let (true, Some(g)) = (a.valid, a.reference()) {
            errors.push(center_error(p, &g));
            overlaps.push(iou(p, &g)?);
        }
    }
    let pr = precision_rate(&errors, tau)?;
    let (sr, curve) = success_rate(&overlaps)?;
    let (mpr, msr) = mpr_msr(pred, ann, tau)?;
    let precision_curve = precision_thresholds(tau)
        .into_iter()
        .map(|t| Ok((t, if t > 0.0 { precision_rate(&errors, t)? } else { 0.0 })))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        pr,
        sr,
        mpr,
        msr,
        tau,
        precision_curve,
        success_curve: success_thresholds().into_iter().zip(curve).collect(),
        frame_count: errors.len(),
    })
}

/// Frame-count-weighted mean of per-sequence reports; curves are averaged the same way.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or(Error::Empty("aggregate"))?;
    let total: usize = reports.iter().map(|r| r.frame_count).sum();
    if total == 0 || reports.iter().any(|r| r.tau != first.tau) {
        return Err(Error::Contract("reports need frames and a common tau".into()));
    }
    let wmean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(|r| f(r) * r.frame_count as f64).sum::<f64>() / total as f64;
    let curve = |get: fn(&EvalReport) -> &Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        get(first)
            .iter()
            .enumerate()
            .map(|(i, &(t, _))| (t, wmean(&|r| get(r)[i].1)))
            .collect()
    };
    Ok(EvalReport {
        pr: wmean(&|r| r.pr),
        sr: wmean(&|r| r.sr),
        mpr: wmean(&|r| r.mpr),
        msr: wmean(&|r| r.msr),
        tau: first.tau,
        precision_curve: curve(|r| &r.precision_curve),
        success_curve: curve(|r| &r.success_curve),
        frame_count: total,
    })
}

impl EvalReport {
    /// `threshold,value` rows of the precision curve.
    pub fn precision_csv(&self) -> String {
        curve_csv(&self.precision_curve)
    }

    /// `threshold,value` rows of the success curve.
    pub fn success_csv(&self) -> String {
        curve_csv(&self.success_curve)
    }

    /// One-line summary, also used as the CSV row of ablation tables.
    pub fn summary(&self) -> String {
        format!("PR={:.4} SR={:.4} MPR={:.4} MSR={:.4} frames={}", self.pr, self.sr, self.mpr, self.msr, self.frame_count)
    }
}

fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in curve {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}
