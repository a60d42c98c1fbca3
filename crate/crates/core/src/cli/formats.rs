//! Result and annotation file formats.
//!
//! Result files start with `#` provenance lines, then a header row and one
//! row per frame:
//! `frame,chosen,r_rgb,r_t,x,y,w,h,rgb_x,rgb_y,rgb_w,rgb_h,t_x,t_y,t_w,t_h`.
//! Boxes are top-left corner plus size in frame pixels.
//!
//! Annotation files hold one `x,y,w,h` line per frame. A line of zeros (or an
//! empty line) marks a frame without ground truth.

use std::fmt::Write as _;

use crate::embedding::Modality;
use crate::heads::{BoundingBox, ReliabilityScores, TrackOutput};
use crate::metrics::FrameAnnotation;
use crate::{Error, Result};

pub const RESULT_HEADER: &str = "frame,chosen,r_rgb,r_t,x,y,w,h,rgb_x,rgb_y,rgb_w,rgb_h,t_x,t_y,t_w,t_h";

/// `[x, y, w, h]` in frame pixels, kept verbatim so files round-trip exactly.
pub type Xywh = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub chosen: Modality,
    pub r_rgb: f64,
    pub r_t: f64,
    pub selected: Xywh,
    pub rgb: Xywh,
    pub thermal: Xywh,
}

impl ResultRow {
    pub fn of(out: &TrackOutput) -> Self {
        ResultRow {
            chosen: out.chosen,
            r_rgb: out.reliability.r_rgb,
            r_t: out.reliability.r_t,
            selected: out.bbox.to_xywh(),
            rgb: out.both[0].to_xywh(),
            thermal: out.both[1].to_xywh(),
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        let [x, y, w, h] = self.selected;
        BoundingBox::from_xywh(x, y, w, h)
    }

    pub fn reliability(&self) -> ReliabilityScores {
        ReliabilityScores::new(self.r_rgb, self.r_t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultFile {
    /// Provenance lines without the leading `# `.
    pub provenance: Vec<String>,
    pub rows: Vec<ResultRow>,
}

fn join(v: &Xywh) -> String {
    format!("{},{},{},{}", v[0], v[1], v[2], v[3])
}

fn parse_f64s(what: &str, line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse { what: what.into(), line, msg: format!("bad number `{f}`") })
        })
        .collect()
}

impl ResultFile {
    pub fn new(provenance: &str, frames: &[TrackOutput]) -> Self {
        ResultFile {
            provenance: provenance.lines().map(|l| l.trim_start_matches('#').trim_start().to_string()).collect(),
            rows: frames.iter().map(ResultRow::of).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.provenance {
            let _ = writeln!(s, "# {p}");
        }
        let _ = writeln!(s, "{RESULT_HEADER}");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{}",
                r.chosen.as_str(),
                r.r_rgb,
                r.r_t,
                join(&r.selected),
                join(&r.rgb),
                join(&r.thermal)
            );
        }
        s
    }

    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let mut provenance = Vec::new();
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(p) = line.strip_prefix('#') {
                provenance.push(p.strip_prefix(' ').unwrap_or(p).to_string());
                continue;
            }
            if !header_seen {
                if line.trim() != RESULT_HEADER {
                    return Err(Error::Parse { what: what.into(), line: n, msg: "missing result header".into() });
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 16 {
                return Err(Error::Parse { what: what.into(), line: n, msg: format!("expected 16 fields, got {}", fields.len()) });
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| Error::Parse { what: what.into(), line: n, msg: format!("bad frame index `{}`", fields[0]) })?;
            if idx != rows.len() {
                return Err(Error::Parse { what: what.into(), line: n, msg: format!("frame {idx} out of order") });
            }
            let chosen = match fields[1] {
                "rgb" => Modality::Rgb,
                "thermal" => Modality::Thermal,
                m => return Err(Error::Parse { what: what.into(), line: n, msg: format!("unknown modality `{m}`") }),
            };
            let v = parse_f64s(what, n, &fields[2..])?;
            let bx = |k: usize| [v[k], v[k + 1], v[k + 2], v[k + 3]];
            rows.push(ResultRow { chosen, r_rgb: v[0], r_t: v[1], selected: bx(2), rgb: bx(6), thermal: bx(10) });
        }
        if !header_seen {
            return Err(Error::Parse { what: what.into(), line: text.lines().count(), msg: "missing result header".into() });
        }
        Ok(ResultFile { provenance, rows })
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.rows.iter().map(ResultRow::bbox).collect()
    }
}

/// One `x,y,w,h` line per frame.
pub fn write_annotations(boxes: &[Xywh]) -> String {
    boxes.iter().map(|b| join(b) + "\n").collect()
}

/// Frame boxes as annotation rows; `None` becomes zeros.
pub fn annotation_rows(boxes: &[Option<BoundingBox>]) -> Vec<Xywh> {
    boxes.iter().map(|b| b.map_or([0.0; 4], |b| b.to_xywh())).collect()
}

pub fn parse_annotations(text: &str, what: &str) -> Result<Vec<Xywh>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            if line.trim().is_empty() {
                return Ok([0.0; 4]);
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse { what: what.into(), line: i + 1, msg: format!("expected x,y,w,h, got `{line}`") });
            }
            let v = parse_f64s(what, i + 1, &fields)?;
            Ok([v[0], v[1], v[2], v[3]])
        })
        .collect()
}

/// The box of an annotation row, `None` for non-positive sizes.
pub fn row_box(v: &Xywh) -> Option<BoundingBox> {
    let b = BoundingBox::from_xywh(v[0], v[1], v[2], v[3]);
    b.is_valid().then_some(b)
}

/// Joins per-modality annotation columns. Without a thermal file every frame
/// has only RGB ground truth.
pub fn join_annotations(rgb: &[Xywh], thermal: Option<&[Xywh]>) -> Result<Vec<FrameAnnotation>> {
    if let Some(t) = thermal {
        if t.len() != rgb.len() {
            return Err(Error::Contract(format!("rgb annotations have {} frames, thermal {}", rgb.len(), t.len())));
        }
    }
    Ok(rgb
        .iter()
        .enumerate()
        .map(|(i, r)| FrameAnnotation::new(row_box(r), thermal.and_then(|t| row_box(&t[i]))))
        .collect())
}
