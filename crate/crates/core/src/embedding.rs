//! Patchification and the dual embedding layer.
//!
//! Each modality has its own linear patch projection. Position tables are
//! shared across modalities (one for template tokens, one for search tokens)
//! and each modality adds its own learned modality vector.

use crate::error::{Error, Result};
use crate::numkernel::{truncated_normal, Bound, ParamId, ParamStore, ParamTag, Rng, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// An aligned visible/thermal image pair, each `[H, W, 3]` with values in `[0, 1]`.
/// Thermal imagery is replicated to three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub rgb: Tensor,
    pub thermal: Tensor,
}

impl ImagePair {
    pub fn new(rgb: Tensor, thermal: Tensor) -> Result<Self> {
        if rgb.shape().len() != 3 || rgb.shape()[2] != 3 || rgb.shape() != thermal.shape() {
            return Err(Error::shape("image_pair", rgb.shape(), thermal.shape()));
        }
        Ok(ImagePair { rgb, thermal })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Thermal => &self.thermal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Rgb => Modality::Thermal,
            Modality::Thermal => Modality::Rgb,
        }
    }
}

/// The four token streams, in the row order of the joint token matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamId {
    SearchRgb,
    SearchThermal,
    TemplateRgb,
    TemplateThermal,
}

impl StreamId {
    pub const ALL: [StreamId; 4] = [
        StreamId::SearchRgb,
        StreamId::SearchThermal,
        StreamId::TemplateRgb,
        StreamId::TemplateThermal,
    ];

    pub fn modality(self) -> Modality {
        match self {
            StreamId::SearchRgb | StreamId::TemplateRgb => Modality::Rgb,
            StreamId::SearchThermal | StreamId::TemplateThermal => Modality::Thermal,
        }
    }

    pub fn is_search(self) -> bool {
        matches!(self, StreamId::SearchRgb | StreamId::SearchThermal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamId::SearchRgb => "x_rgb",
            StreamId::SearchThermal => "x_t",
            StreamId::TemplateRgb => "z_rgb",
            StreamId::TemplateThermal => "z_t",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub tokens: Tensor,
    pub stream: StreamId,
}

/// Splits an `[H, W, C]` image into `P×P` patches.
///
/// Patches are ordered row-major over the patch grid; each patch is flattened
/// row-major over (row, col, channel), giving `[H·W/P², C·P²]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || !s[0].is_multiple_of(patch) || !s[1].is_multiple_of(patch) {
        return Err(Error::shape("patchify", s, &[patch, patch]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let width = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gi in 0..gh {
        for gj in 0..gw {
            for r in 0..patch {
                let row = gi * patch + r;
                let start = (row * w + gj * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::shape("unpatchify", &[height, width], &[patch]));
    }
    let (gh, gw) = (height / patch, width / patch);
    if patches.rows() != gh * gw || !patches.cols().is_multiple_of(patch * patch) {
        return Err(Error::shape("unpatchify", patches.shape(), &[gh * gw, patch * patch]));
    }
    let c = patches.cols() / (patch * patch);
    let mut out = vec![0.0; height * width * c];
    for gi in 0..gh {
        for gj in 0..gw {
            let p = patches.row(gi * gw + gj);
            for r in 0..patch {
                let row = gi * patch + r;
                let start = (row * width + gj * patch) * c;
                out[start..start + patch * c].copy_from_slice(&p[r * patch * c..(r + 1) * patch * c]);
            }
        }
    }
    Tensor::new(&[height, width, c], out)
}

/// Parameter handles of the dual embedding layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub proj_rgb: ParamId,
    /// Equal to `proj_rgb` in single-embedding mode.
    pub proj_thermal: ParamId,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub modality_rgb: ParamId,
    pub modality_thermal: ParamId,
    pub patch: usize,
    pub dim: usize,
    pub template_tokens: usize,
    pub search_tokens: usize,
}

impl EmbeddingTables {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        patch: usize,
        dim: usize,
        template_size: usize,
        search_size: usize,
        dual: bool,
    ) -> Result<Self> {
        if !template_size.is_multiple_of(patch) || !search_size.is_multiple_of(patch) {
            return Err(Error::shape("embedding", &[template_size, search_size], &[patch]));
        }
        let in_dim = 3 * patch * patch;
        let n_z = (template_size / patch).pow(2);
        let n_x = (search_size / patch).pow(2);
        let mut add = |name: &str, shape: &[usize]| {
            store.add(format!("embed.{name}"), truncated_normal(rng, shape, INIT_STD), ParamTag::Backbone)
        };
        let proj_rgb = add("proj_rgb", &[in_dim, dim]);
        let proj_thermal = if dual { add("proj_thermal", &[in_dim, dim]) } else { proj_rgb };
        let pos_template = add("pos_template", &[n_z, dim]);
        let pos_search = add("pos_search", &[n_x, dim]);
        let modality_rgb = add("modality_rgb", &[dim]);
        let modality_thermal = add("modality_thermal", &[dim]);
        Ok(EmbeddingTables {
            proj_rgb,
            proj_thermal,
            pos_template,
            pos_search,
            modality_rgb,
            modality_thermal,
            patch,
            dim,
            template_tokens: n_z,
            search_tokens: n_x,
        })
    }

    pub fn is_dual(&self) -> bool {
        self.proj_rgb != self.proj_thermal
    }

    fn tables_for(&self, stream: StreamId) -> (ParamId, ParamId, ParamId, usize) {
        let (proj, modality) = match stream.modality() {
            Modality::Rgb => (self.proj_rgb, self.modality_rgb),
            Modality::Thermal => (self.proj_thermal, self.modality_thermal),
        };
        if stream.is_search() {
            (proj, self.pos_search, modality, self.search_tokens)
        } else {
            (proj, self.pos_template, modality, self.template_tokens)
        }
    }

    /// Embeds one stream for a batch on the tape. `patches` is the row-stack of
    /// `batch` patchified images, `[batch·N, 3P²]`; the result is `[batch·N, D]`.
    pub fn embed_stream(&self, tape: &mut Tape, params: &Bound, stream: StreamId, patches: Var, batch: usize) -> Result<Var> {
        let (proj, pos, modality, n) = self.tables_for(stream);
        if tape.value(patches).rows() != batch * n {
            return Err(Error::shape("embed_stream", tape.value(patches).shape(), &[batch * n, 3 * self.patch * self.patch]));
        }
        let projected = tape.matmul(patches, params.var(proj))?;
        let tiled_pos = if batch == 1 {
            params.var(pos)
        } else {
            let idx = (0..batch).flat_map(|_| (0..n).map(Some)).collect();
            tape.gather_rows(params.var(pos), idx, 1)?
        };
        let with_pos = tape.add(projected, tiled_pos)?;
        tape.add_row(with_pos, params.var(modality))
    }
}

/// Value-level dual embedding of a template pair and a search pair.
///
/// Returns the four streams in joint-matrix order `[x_rgb, x_t, z_rgb, z_t]`.
pub fn embed_pair(templates: &ImagePair, searches: &ImagePair, tables: &EmbeddingTables, store: &ParamStore) -> Result<[TokenStream; 4]> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let mut out = Vec::with_capacity(4);
    for stream in StreamId::ALL {
        let pair = if stream.is_search() { searches } else { templates };
        let patches = patchify(pair.modality(stream.modality()), tables.patch)?;
        let v = tape.constant(patches);
        let tokens = tables.embed_stream(&mut tape, &params, stream, v, 1)?;
        out.push(TokenStream {
            tokens: tape.value(tokens).clone(),
            stream,
        });
    }
    Ok(out.try_into().expect("four streams"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{seeded, uniform};

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        uniform(&mut seeded(seed), &[h, w, 3], 0.0, 1.0)
    }

    #[test]
    fn patchify_shapes() {
        assert_eq!(patchify(&Tensor::zeros(&[4, 4, 3]), 2).unwrap().shape(), &[4, 12]);
        assert_eq!(patchify(&Tensor::zeros(&[128, 128, 3]), 16).unwrap().rows(), 64);
        assert_eq!(patchify(&Tensor::zeros(&[256, 256, 3]), 16).unwrap().rows(), 256);
        assert!(patchify(&Tensor::zeros(&[6, 4, 3]), 4).is_err());
    }

    #[test]
    fn patchify_order_is_row_major() {
        let data: Vec<f64> = (0..4 * 4 * 3).map(|v| v as f64).collect();
        let img = Tensor::new(&[4, 4, 3], data).unwrap();
        let p = patchify(&img, 2).unwrap();
        // patch (0,1) starts at pixel (0,2)
        assert_eq!(p.row(1)[0], (2 * 3) as f64);
        // second row of patch (1,0) starts at pixel (3,0)
        assert_eq!(p.row(2)[6], ((3 * 4) * 3) as f64);
    }

    #[test]
    fn unpatchify_round_trips() {
        let img = random_image(1, 16, 24);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(unpatchify(&p, 16, 24, 8).unwrap(), img);
    }

    fn tables(dual: bool, seed: u64) -> (ParamStore, EmbeddingTables) {
        let mut store = ParamStore::new();
        let t = EmbeddingTables::init(&mut store, &mut seeded(seed), 4, 6, 8, 16, dual).unwrap();
        (store, t)
    }

    #[test]
    fn zero_inputs_and_tables_give_zero_streams() {
        let (mut store, t) = tables(true, 2);
        for id in [t.pos_template, t.pos_search, t.modality_rgb, t.modality_thermal] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let z = ImagePair::new(Tensor::zeros(&[8, 8, 3]), Tensor::zeros(&[8, 8, 3])).unwrap();
        let x = ImagePair::new(Tensor::zeros(&[16, 16, 3]), Tensor::zeros(&[16, 16, 3])).unwrap();
        for s in embed_pair(&z, &x, &t, &store).unwrap() {
            assert!(s.tokens.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identical_modalities_with_equal_tables_give_identical_streams() {
        let (mut store, t) = tables(true, 3);
        let e = store.value(t.proj_rgb).clone();
        *store.value_mut(t.proj_thermal) = e;
        let m = store.value(t.modality_rgb).clone();
        *store.value_mut(t.modality_thermal) = m;
        let zi = random_image(4, 8, 8);
        let xi = random_image(5, 16, 16);
        let z = ImagePair::new(zi.clone(), zi).unwrap();
        let x = ImagePair::new(xi.clone(), xi).unwrap();
        let s = embed_pair(&z, &x, &t, &store).unwrap();
        assert_eq!(s[0].tokens, s[1].tokens);
        assert_eq!(s[2].tokens, s[3].tokens);
    }

    #[test]
    fn single_patch_matches_direct_arithmetic() {
        // P = H = W: one token per stream
        let mut store = ParamStore::new();
        let t = EmbeddingTables::init(&mut store, &mut seeded(6), 4, 5, 4, 4, true).unwrap();
        let img = random_image(7, 4, 4);
        let pair = ImagePair::new(img.clone(), random_image(8, 4, 4)).unwrap();
        let s = embed_pair(&pair, &pair, &t, &store).unwrap();
        let flat = img.data();
        let e = store.value(t.proj_rgb);
        let pos = store.value(t.pos_search);
        let m = store.value(t.modality_rgb);
        for d in 0..5 {
            let mut acc = 0.0;
            for (k, v) in flat.iter().enumerate() {
                acc += v * e.at(k, d);
            }
            let expect = acc + pos.data()[d] + m.data()[d];
            assert!((s[0].tokens.data()[d] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn swapping_modalities_swaps_streams() {
        let (store, t) = tables(true, 9);
        let mut swapped = store.clone();
        *swapped.value_mut(t.proj_rgb) = store.value(t.proj_thermal).clone();
        *swapped.value_mut(t.proj_thermal) = store.value(t.proj_rgb).clone();
        *swapped.value_mut(t.modality_rgb) = store.value(t.modality_thermal).clone();
        *swapped.value_mut(t.modality_thermal) = store.value(t.modality_rgb).clone();
        let z = ImagePair::new(random_image(10, 8, 8), random_image(11, 8, 8)).unwrap();
        let x = ImagePair::new(random_image(12, 16, 16), random_image(13, 16, 16)).unwrap();
        let zs = ImagePair::new(z.thermal.clone(), z.rgb.clone()).unwrap();
        let xs = ImagePair::new(x.thermal.clone(), x.rgb.clone()).unwrap();
        let a = embed_pair(&z, &x, &t, &store).unwrap();
        let b = embed_pair(&zs, &xs, &t, &swapped).unwrap();
        assert_eq!(a[0].tokens, b[1].tokens);
        assert_eq!(a[1].tokens, b[0].tokens);
        assert_eq!(a[2].tokens, b[3].tokens);
        assert_eq!(a[3].tokens, b[2].tokens);
    }

    #[test]
    fn single_mode_matches_dual_with_equal_tables() {
        let (single_store, single) = tables(false, 14);
        assert!(!single.is_dual());
        // build a dual store whose two projections both equal the single table
        let (mut dual_store, dual) = tables(true, 14);
        let e = single_store.value(single.proj_rgb).clone();
        *dual_store.value_mut(dual.proj_rgb) = e.clone();
        *dual_store.value_mut(dual.proj_thermal) = e;
        for (d, s) in [
            (dual.pos_template, single.pos_template),
            (dual.pos_search, single.pos_search),
            (dual.modality_rgb, single.modality_rgb),
            (dual.modality_thermal, single.modality_thermal),
        ] {
            *dual_store.value_mut(d) = single_store.value(s).clone();
        }
        let z = ImagePair::new(random_image(15, 8, 8), random_image(16, 8, 8)).unwrap();
        let x = ImagePair::new(random_image(17, 16, 16), random_image(18, 16, 16)).unwrap();
        assert_eq!(embed_pair(&z, &x, &single, &single_store).unwrap(), embed_pair(&z, &x, &dual, &dual_store).unwrap());
        let dual_count = dual_store.trainable_scalars();
        let single_count = single_store.trainable_scalars();
        assert_eq!(dual_count - single_count, 3 * 4 * 4 * 6);
    }

    #[test]
    fn gradients_reach_one_projection_per_stream() {
        let (store, t) = tables(true, 19);
        for stream in StreamId::ALL {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape, true);
            let img = if stream.is_search() { random_image(20, 16, 16) } else { random_image(20, 8, 8) };
            let p = tape.constant(patchify(&img, 4).unwrap());
            let out = t.embed_stream(&mut tape, &params, stream, p, 1).unwrap();
            let loss = tape.sum(out).unwrap();
            tape.backward(loss).unwrap();
            let rgb = tape.grad(params.var(t.proj_rgb)).is_some();
            let th = tape.grad(params.var(t.proj_thermal)).is_some();
            assert_eq!(rgb, stream.modality() == Modality::Rgb, "{stream:?}");
            assert_eq!(th, stream.modality() == Modality::Thermal, "{stream:?}");
        }
    }
}
