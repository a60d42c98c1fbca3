//! Procedural RGB/thermal sequences with per-frame degradations.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::embedding::{ImagePair, Modality};
use crate::heads::BoundingBox;
use crate::metrics::FrameAnnotation;
use crate::numkernel::{seeded, Rng, Tensor};
use crate::{Error, Result};

/// What happens to one modality's image in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Degradation {
    Clean,
    /// Replaced by uniform noise.
    Noise,
    /// Replaced by zeros.
    Blank,
    /// Intensity scaled by 0.2.
    Dim,
}

impl Degradation {
    pub fn as_str(self) -> &'static str {
        match self {
            Degradation::Clean => "clean",
            Degradation::Noise => "noise",
            Degradation::Blank => "blank",
            Degradation::Dim => "dim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Degradation::Clean, Degradation::Noise, Degradation::Blank, Degradation::Dim]
            .into_iter()
            .find(|d| d.as_str() == s)
    }
}

/// Per-frame `[rgb, thermal]` degradations.
pub type Schedule = Vec<[Degradation; 2]>;

pub fn clean_schedule(frames: usize) -> Schedule {
    vec![[Degradation::Clean; 2]; frames]
}

/// Applies `kind` to `modality` over `span`.
pub fn degrade_span(schedule: &mut Schedule, modality: Modality, kind: Degradation, span: std::ops::Range<usize>) {
    let m = modality_index(modality);
    let n = schedule.len();
    for f in span.filter(|&f| f < n) {
        schedule[f][m] = kind;
    }
}

fn modality_index(m: Modality) -> usize {
    match m {
        Modality::Rgb => 0,
        Modality::Thermal => 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Frame-0 box in pixels.
    pub init_box: BoundingBox,
    /// Velocity bound in pixels per frame.
    pub max_speed: f64,
    /// Number of static distractor blobs per modality.
    pub distractors: usize,
    pub schedule: Schedule,
}

impl SyntheticScenario {
    /// A clean scenario with a random target placement derived from `seed`.
    pub fn random(seed: u64, num_frames: usize, size: usize) -> Self {
        let mut rng = seeded(seed ^ 0x5eed_5eed);
        let s = size as f64;
        let w = rng.gen_range(0.11..0.2) * s;
        let h = (w * rng.gen_range(0.7..1.4)).clamp(0.09 * s, 0.22 * s);
        let cx = rng.gen_range(1.5 * w..s - 1.5 * w);
        let cy = rng.gen_range(1.5 * h..s - 1.5 * h);
        SyntheticScenario {
            seed,
            num_frames,
            height: size,
            width: size,
            init_box: BoundingBox::new(cx, cy, w, h),
            max_speed: 2.5,
            distractors: 2,
            schedule: clean_schedule(num_frames),
        }
    }

    fn validate(&self) -> Result<()> {
        let b = &self.init_box;
        if self.num_frames == 0 || self.schedule.len() != self.num_frames {
            return Err(Error::Generation(format!(
                "schedule covers {} frames, scenario has {}",
                self.schedule.len(),
                self.num_frames
            )));
        }
        if !b.is_valid()
            || b.cx < 1.5 * b.w
            || b.cy < 1.5 * b.h
            || b.cx > self.width as f64 - 1.5 * b.w
            || b.cy > self.height as f64 - 1.5 * b.h
        {
            return Err(Error::Generation(format!("initial box {b:?} is not one target width inside the frame")));
        }
        Ok(())
    }
}

/// Per-modality look of a blob.
#[derive(Clone, Debug, PartialEq)]
struct Look {
    color: [f64; 3],
    /// Stripe frequency and phase of the RGB texture.
    freq: (f64, f64),
    phase: f64,
    heat: f64,
}

impl Look {
    fn random(rng: &mut Rng) -> Self {
        Look {
            color: [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)],
            freq: (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0)),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            heat: rng.gen_range(0.75..1.0),
        }
    }
}

/// Static background layers and object looks of one scenario.
#[derive(Clone, Debug)]
pub struct Scene {
    pub scenario: SyntheticScenario,
    background: [Vec<f64>; 2],
    target: Look,
    distractors: Vec<(BoundingBox, Look)>,
    trajectory: Vec<BoundingBox>,
}

fn smooth_field(rng: &mut Rng, h: usize, w: usize, base: [f64; 3], amp: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, usize)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0..3),
            )
        })
        .collect();
    let mut out = vec![0.0; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            let px = &mut out[(i * w + j) * 3..(i * w + j) * 3 + 3];
            px.copy_from_slice(&base);
            for &(fx, fy, ph, c) in &waves {
                let v = amp * (fx * j as f64 + fy * i as f64 + ph).sin();
                px[c] += v;
                px[(c + 1) % 3] += 0.5 * v;
            }
        }
    }
    out
}

/// Soft elliptical mask in box-relative coordinates, with `(u, v)` in `[-1, 1]` at the box edge.
fn blob_alpha(u: f64, v: f64) -> (f64, f64) {
    let r = (u * u + v * v).sqrt();
    (((1.0 - r) / 0.2).clamp(0.0, 1.0), r)
}

fn paint(img: &mut [f64], h: usize, w: usize, b: &BoundingBox, look: &Look, thermal: bool) {
    let [x0, y0, x1, y1] = b.corners();
    let (i0, i1) = (y0.floor().max(0.0) as usize, (y1.ceil() as usize).min(h));
    let (j0, j1) = (x0.floor().max(0.0) as usize, (x1.ceil() as usize).min(w));
    for i in i0..i1 {
        for j in j0..j1 {
            let u = (j as f64 + 0.5 - b.cx) / (b.w / 2.0);
            let v = (i as f64 + 0.5 - b.cy) / (b.h / 2.0);
            let (a, r) = blob_alpha(u, v);
            if a == 0.0 {
                continue;
            }
            let px = &mut img[(i * w + j) * 3..(i * w + j) * 3 + 3];
            if thermal {
                let t = look.heat * (1.0 - 0.35 * r * r);
                px.iter_mut().for_each(|p| *p = (1.0 - a) * *p + a * t);
            } else {
                let tex = 0.7 + 0.3 * (look.freq.0 * u * 3.0 + look.phase).sin() * (look.freq.1 * v * 3.0).cos();
                for c in 0..3 {
                    px[c] = (1.0 - a) * px[c] + a * look.color[c] * tex;
                }
            }
        }
    }
}

impl Scene {
    pub fn new(scenario: SyntheticScenario) -> Result<Self> {
        scenario.validate()?;
        let mut rng = seeded(scenario.seed);
        let (h, w) = (scenario.height, scenario.width);
        let rgb_base = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
        let rgb_bg = smooth_field(&mut rng, h, w, rgb_base, 0.12);
        let t_level = rng.gen_range(0.15..0.35);
        let t_bg = smooth_field(&mut rng, h, w, [t_level; 3], 0.05);
        // thermal background is grey: average the channels
        let t_bg = t_bg.chunks(3).flat_map(|p| [(p[0] + p[1] + p[2]) / 3.0; 3]).collect();
        let target = Look::random(&mut rng);
        let b0 = scenario.init_box;
        let distractors = (0..scenario.distractors)
            .map(|_| {
                let (dw, dh) = (b0.w * rng.gen_range(0.7..1.2), b0.h * rng.gen_range(0.7..1.2));
                let b = BoundingBox::new(rng.gen_range(dw..w as f64 - dw), rng.gen_range(dh..h as f64 - dh), dw, dh);
                let mut look = Look::random(&mut rng);
                // distractors are cooler than the target
                look.heat = rng.gen_range(0.35..0.6);
                (b, look)
            })
            .collect();
        let trajectory = walk(&mut rng, &scenario);
        Ok(Scene { scenario, background: [rgb_bg, t_bg], target, distractors, trajectory })
    }

    pub fn trajectory(&self) -> &[BoundingBox] {
        &self.trajectory
    }

    /// Renders frame `f` with its scheduled degradations.
    pub fn render(&self, f: usize) -> Result<ImagePair> {
        let s = &self.scenario;
        if f >= s.num_frames {
            return Err(Error::Range { op: "render", start: f, end: f + 1, len: s.num_frames });
        }
        let (h, w) = (s.height, s.width);
        let mut imgs = self.background.clone();
        for (m, img) in imgs.iter_mut().enumerate() {
            for (b, look) in &self.distractors {
                paint(img, h, w, b, look, m == 1);
            }
            paint(img, h, w, &self.trajectory[f], &self.target, m == 1);
            img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        }
        let mut noise_rng = seeded(s.seed.wrapping_mul(0x9e37_79b9).wrapping_add(f as u64));
        for (m, img) in imgs.iter_mut().enumerate() {
            match s.schedule[f][m] {
                Degradation::Clean => {}
                Degradation::Noise => img.iter_mut().for_each(|p| *p = noise_rng.gen_range(0.0..1.0)),
                Degradation::Blank => img.iter_mut().for_each(|p| *p = 0.0),
                Degradation::Dim => img.iter_mut().for_each(|p| *p *= 0.2),
            }
        }
        let [rgb, t] = imgs;
        ImagePair::new(Tensor::new(&[h, w, 3], rgb)?, Tensor::new(&[h, w, 3], t)?)
    }
}

/// Random walk with bounded velocity, reflected so the target stays one width inside.
fn walk(rng: &mut Rng, s: &SyntheticScenario) -> Vec<BoundingBox> {
    let mut b = s.init_box;
    let (mut vx, mut vy) = (0.0, 0.0);
    let mut out = Vec::with_capacity(s.num_frames);
    let (lo_x, hi_x) = (1.5 * b.w, s.width as f64 - 1.5 * b.w);
    let (lo_y, hi_y) = (1.5 * b.h, s.height as f64 - 1.5 * b.h);
    for f in 0..s.num_frames {
        if f > 0 {
            vx += 0.6 * rng.sample::<f64, _>(StandardNormal);
            vy += 0.6 * rng.sample::<f64, _>(StandardNormal);
            let speed = vx.hypot(vy);
            if speed > s.max_speed {
                vx *= s.max_speed / speed;
                vy *= s.max_speed / speed;
            }
            b.cx += vx;
            b.cy += vy;
            if b.cx < lo_x || b.cx > hi_x {
                vx = -vx;
                b.cx = b.cx.clamp(lo_x, hi_x);
            }
            if b.cy < lo_y || b.cy > hi_y {
                vy = -vy;
                b.cy = b.cy.clamp(lo_y, hi_y);
            }
        }
        out.push(b);
    }
    out
}

/// Renders every frame of a scenario with aligned annotations.
pub fn generate_sequence(s: &SyntheticScenario) -> Result<(Vec<ImagePair>, Vec<FrameAnnotation>)> {
    let scene = Scene::new(s.clone())?;
    let frames = (0..s.num_frames).map(|f| scene.render(f)).collect::<Result<_>>()?;
    let ann = scene.trajectory.iter().map(|&b| FrameAnnotation::aligned(b)).collect();
    Ok((frames, ann))
}

/// Held-out evaluation scenario: one contiguous noise span on one modality.
pub fn noise_span_scenario(seed: u64, num_frames: usize, size: usize) -> SyntheticScenario {
    let mut s = SyntheticScenario::random(seed, num_frames, size);
    let mut rng = seeded(seed ^ 0xdead_beef);
    let modality = if rng.gen_bool(0.5) { Modality::Rgb } else { Modality::Thermal };
    let len = rng.gen_range(num_frames / 4..=num_frames / 2);
    let start = rng.gen_range(1..num_frames - len);
    degrade_span(&mut s.schedule, modality, Degradation::Noise, start..start + len);
    s
}
