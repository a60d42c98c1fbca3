//! Square template/search crops with bilinear resampling.

use crate::embedding::ImagePair;
use crate::heads::BoundingBox;
use crate::numkernel::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { template_factor: 2.0, search_factor: 4.0, template_size: 32, search_size: 64 }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_size != 2 * self.template_size {
            return Err(Error::Config {
                field: "crop.search_size".into(),
                msg: format!("must be twice the template size {}", self.template_size),
            });
        }
        if !(self.template_factor >= 1.0 && self.search_factor >= 1.0) {
            return Err(Error::Config { field: "crop.factor".into(), msg: "crop factors must be at least 1".into() });
        }
        Ok(())
    }
}

/// A square frame region `[x0, x0+side) × [y0, y0+side)` resampled to `out × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Window of side `factor·sqrt(w·h)` centered at `(cx, cy)`.
    pub fn around(cx: f64, cy: f64, b: &BoundingBox, factor: f64, out: usize) -> Result<Self> {
        if !b.is_valid() {
            return Err(Error::Domain(format!("cannot crop around degenerate box {b:?}")));
        }
        let side = factor * (b.w * b.h).sqrt();
        Ok(CropWindow { x0: cx - side / 2.0, y0: cy - side / 2.0, side, out })
    }

    /// Frame-pixel box to normalized crop coordinates.
    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new((b.cx - self.x0) / self.side, (b.cy - self.y0) / self.side, b.w / self.side, b.h / self.side)
    }

    /// Normalized crop box back to frame pixels.
    pub fn to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(self.x0 + b.cx * self.side, self.y0 + b.cy * self.side, b.w * self.side, b.h * self.side)
    }
}

/// Bilinear resample of `img` (`[H, W, C]`) over `win`; pixels outside the
/// frame take the channel mean.
pub fn crop_image(img: &Tensor, win: &CropWindow) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("crop_image", s, &[0, 0, 0]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = img.data();
    let mut mean = vec![0.0; c];
    for px in src.chunks(c) {
        mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= (h * w) as f64);
    let fetch = |i: isize, j: isize, ch: usize| -> f64 {
        if i < 0 || j < 0 || i as usize >= h || j as usize >= w {
            mean[ch]
        } else {
            src[(i as usize * w + j as usize) * c + ch]
        }
    };
    let n = win.out;
    let scale = win.side / n as f64;
    let mut out = vec![0.0; n * n * c];
    for oi in 0..n {
        let y = win.y0 + (oi as f64 + 0.5) * scale - 0.5;
        let (yi, fy) = (y.floor(), y - y.floor());
        for oj in 0..n {
            let x = win.x0 + (oj as f64 + 0.5) * scale - 0.5;
            let (xi, fx) = (x.floor(), x - x.floor());
            let (yi, xi) = (yi as isize, xi as isize);
            for ch in 0..c {
                let top = fetch(yi, xi, ch) * (1.0 - fx) + fetch(yi, xi + 1, ch) * fx;
                let bottom = fetch(yi + 1, xi, ch) * (1.0 - fx) + fetch(yi + 1, xi + 1, ch) * fx;
                out[(oi * n + oj) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[n, n, c], out)
}

fn crop_pair(frame: &ImagePair, win: &CropWindow) -> Result<ImagePair> {
    ImagePair::new(crop_image(&frame.rgb, win)?, crop_image(&frame.thermal, win)?)
}

/// Template crop centered on `b`.
pub fn crop_template(frame: &ImagePair, b: &BoundingBox, cfg: &CropConfig) -> Result<(ImagePair, CropWindow)> {
    let win = CropWindow::around(b.cx, b.cy, b, cfg.template_factor, cfg.template_size)?;
    Ok((crop_pair(frame, &win)?, win))
}

/// Search crop centered on `b`.
pub fn crop_search(frame: &ImagePair, b: &BoundingBox, cfg: &CropConfig) -> Result<(ImagePair, CropWindow)> {
    crop_search_at(frame, b.cx, b.cy, b, cfg)
}

/// Search crop sized by `b` but centered at `(cx, cy)`.
pub fn crop_search_at(frame: &ImagePair, cx: f64, cy: f64, b: &BoundingBox, cfg: &CropConfig) -> Result<(ImagePair, CropWindow)> {
    let win = CropWindow::around(cx, cy, b, cfg.search_factor, cfg.search_size)?;
    Ok((crop_pair(frame, &win)?, win))
}
