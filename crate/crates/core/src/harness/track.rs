//! Sequence tracking with a fixed template and previous-box search crops.

use super::crop::{crop_search, crop_template, CropConfig};
use super::model::Model;
use crate::embedding::ImagePair;
use crate::heads::{hann_window, BoundingBox, TrackOutput};
use crate::numkernel::Tensor;
use crate::Result;

/// Smallest box side, in pixels, used to size the next search crop.
const MIN_SIDE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackOptions {
    pub crop: CropConfig,
    /// Multiply the score map by a Hann window before decoding.
    pub hanning: bool,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions { crop: CropConfig::default(), hanning: true }
    }
}

/// Keeps the box that drives the next crop inside the frame and non-degenerate.
fn sanitize(b: &BoundingBox, height: usize, width: usize) -> BoundingBox {
    let (h, w) = (height as f64, width as f64);
    BoundingBox::new(
        b.cx.clamp(0.0, w),
        b.cy.clamp(0.0, h),
        b.w.clamp(MIN_SIDE, w),
        b.h.clamp(MIN_SIDE, h),
    )
}

/// Tracks several sequences in lockstep, batching one forward per frame index.
/// Each output has one entry per frame of its sequence; frame 0 is predicted
/// from a search crop around `init`.
pub fn track_sequences(
    model: &Model,
    sequences: &[(&[ImagePair], BoundingBox)],
    opts: &TrackOptions,
) -> Result<Vec<Vec<TrackOutput>>> {
    let side = model.config.search_tokens().isqrt();
    let window: Option<Tensor> = opts.hanning.then(|| hann_window(side));
    let mut templates = Vec::with_capacity(sequences.len());
    for (frames, init) in sequences {
        let first = frames.first().ok_or(crate::Error::Empty("sequence frames"))?;
        templates.push(crop_template(first, init, &opts.crop)?.0);
    }
    let mut prev: Vec<BoundingBox> = sequences.iter().map(|s| s.1).collect();
    let mut outputs: Vec<Vec<TrackOutput>> = sequences.iter().map(|s| Vec::with_capacity(s.0.len())).collect();
    let longest = sequences.iter().map(|s| s.0.len()).max().unwrap_or(0);
    for f in 0..longest {
        let active: Vec<usize> = (0..sequences.len()).filter(|&i| f < sequences[i].0.len()).collect();
        let mut searches = Vec::with_capacity(active.len());
        let mut windows = Vec::with_capacity(active.len());
        for &i in &active {
            let frame = &sequences[i].0[f];
            let (height, width) = (frame.rgb.shape()[0], frame.rgb.shape()[1]);
            let (search, win) = crop_search(frame, &sanitize(&prev[i], height, width), &opts.crop)?;
            searches.push(search);
            windows.push(win);
        }
        let pairs: Vec<(&ImagePair, &ImagePair)> = active.iter().zip(&searches).map(|(&i, s)| (&templates[i], s)).collect();
        let inferred = model.infer_batch(&pairs)?;
        for ((&i, inf), win) in active.iter().zip(inferred).zip(windows) {
            let mut out = inf.select(window.as_ref());
            out.bbox = win.to_frame(&out.bbox);
            out.both = out.both.map(|b| win.to_frame(&b));
            prev[i] = out.bbox;
            outputs[i].push(out);
        }
    }
    Ok(outputs)
}

pub fn track_sequence(model: &Model, frames: &[ImagePair], init: BoundingBox, opts: &TrackOptions) -> Result<Vec<TrackOutput>> {
    Ok(track_sequences(model, &[(frames, init)], opts)?.remove(0))
}
