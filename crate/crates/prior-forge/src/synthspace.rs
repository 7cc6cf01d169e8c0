//! Procedural patches, captions and a fixed analytically invertible joint
//! embedding space standing in for a CLIP-like encoder.
//!
//! Image features are `[one-hot concept | one-hot domain | coarse 3x3x3 RGB
//! histogram]` pushed through a seeded projection with orthonormal columns,
//! so the transpose recovers the features exactly and every downstream claim
//! (domain, concept, palette) has an oracle.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::colorlab::{self, ColorHistogram};
use crate::error::{Error, Result};
use crate::linalg;
use crate::util::{self, derive_seed, gaussian_matrix, normalize, rng_from_seed};

pub const RGB_HIST_SIDE: usize = 3;
pub const RGB_HIST_BINS: usize = RGB_HIST_SIDE * RGB_HIST_SIDE * RGB_HIST_SIDE;
pub const NUM_DOMAINS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    Texture,
    Vector,
    Isolated,
    Photo,
}

impl DomainLabel {
    pub const ALL: [DomainLabel; NUM_DOMAINS] = [
        DomainLabel::Texture,
        DomainLabel::Vector,
        DomainLabel::Isolated,
        DomainLabel::Photo,
    ];

    pub fn index(self) -> usize {
        match self {
            DomainLabel::Texture => 0,
            DomainLabel::Vector => 1,
            DomainLabel::Isolated => 2,
            DomainLabel::Photo => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainLabel::Texture => "texture",
            DomainLabel::Vector => "vector",
            DomainLabel::Isolated => "isolated",
            DomainLabel::Photo => "photo",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown domain {s:?}")))
    }
}

const DEFAULT_CONCEPTS: [&str; 16] = [
    "berry", "leaf", "stone", "wave", "cloud", "flame", "shell", "branch",
    "gear", "lantern", "ribbon", "kite", "acorn", "feather", "crystal", "moth",
];

const COLOR_WORDS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("orange", [1.0, 0.5, 0.0]),
    ("purple", [0.6, 0.0, 0.8]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

/// Token table over concept, domain and color words with dense ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub concepts: Vec<String>,
    pub domain_words: Vec<String>,
    pub color_words: Vec<String>,
    token_table: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(concepts: Vec<String>) -> Result<Self> {
        let domain_words: Vec<String> =
            DomainLabel::ALL.iter().map(|d| d.as_str().to_string()).collect();
        let color_words: Vec<String> = COLOR_WORDS.iter().map(|(w, _)| w.to_string()).collect();
        let mut token_table = BTreeMap::new();
        let mut next = 0usize;
        for name in concepts.iter().chain(domain_words.iter()).chain(color_words.iter()) {
            if token_table.insert(name.clone(), next).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word {name:?}")));
            }
            next += 1;
        }
        Ok(Vocabulary { concepts, domain_words, color_words, token_table })
    }

    pub fn size(&self) -> usize {
        self.token_table.len()
    }

    pub fn token_id(&self, word: &str) -> Result<usize> {
        self.token_table
            .get(word)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown word {word:?}")))
    }

    pub fn word_of(&self, id: usize) -> Result<&str> {
        self.token_table
            .iter()
            .find(|(_, v)| **v == id)
            .map(|(k, _)| k.as_str())
            .ok_or_else(|| Error::invalid(format!("unknown token id {id}")))
    }

    pub fn concept_token(&self, concept_id: usize) -> Result<usize> {
        let name = self
            .concepts
            .get(concept_id)
            .ok_or_else(|| Error::invalid(format!("unknown concept id {concept_id}")))?;
        self.token_id(name)
    }

    pub fn color_token(&self, color_word: &str) -> Result<usize> {
        if !self.color_words.iter().any(|w| w == color_word) {
            return Err(Error::invalid(format!("not a color word: {color_word:?}")));
        }
        self.token_id(color_word)
    }

    /// Concept id if the token is a concept word.
    pub fn concept_of_token(&self, id: usize) -> Option<usize> {
        let word = self.word_of(id).ok()?;
        self.concepts.iter().position(|c| c == word)
    }

    /// Canonical RGB if the token is a color word.
    pub fn color_of_token(&self, id: usize) -> Option<[f32; 3]> {
        let word = self.word_of(id).ok()?;
        COLOR_WORDS.iter().find(|(w, _)| *w == word).map(|(_, rgb)| *rgb)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(DEFAULT_CONCEPTS.iter().map(|s| s.to_string()).collect()).unwrap()
    }
}

/// H x W x 3 sRGB patch with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterPatch {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<f32>,
}

impl RasterPatch {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        RasterPatch { width, height, data }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, color: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = color[0].clamp(0.0, 1.0);
        self.data[i + 1] = color[1].clamp(0.0, 1.0);
        self.data[i + 2] = color[2].clamp(0.0, 1.0);
    }

    pub fn pixels_iter(&self) -> impl Iterator<Item = (f32, f32, f32)> + '_ {
        self.data.chunks_exact(3).map(|c| (c[0], c[1], c[2]))
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for v in &self.data {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out
    }

    /// Parses a binary PPM (P6, maxval 255); accepts any whitespace between
    /// header tokens.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(Error::Format("not a binary PPM (P6) file".into()));
        }
        let width: usize =
            token()?.parse().map_err(|_| Error::Format("bad PPM width".into()))?;
        let height: usize =
            token()?.parse().map_err(|_| Error::Format("bad PPM height".into()))?;
        let maxval: usize =
            token()?.parse().map_err(|_| Error::Format("bad PPM maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the payload
        let payload = pos + 1;
        let need = width * height * 3;
        if bytes.len() < payload + need {
            return Err(Error::Format("PPM payload truncated".into()));
        }
        let data = bytes[payload..payload + need]
            .iter()
            .map(|b| *b as f32 / 255.0)
            .collect();
        Ok(RasterPatch { width, height, data })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub dim: usize,
    pub concepts: usize,
    pub noise_sigma: f32,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig { dim: 64, concepts: 16, noise_sigma: 0.02, patch_size: 32, seed: 0 }
    }
}

/// Frozen joint embedding space; the projection has orthonormal columns so
/// its transpose is the exact pseudo-inverse.
#[derive(Debug, Clone)]
pub struct EmbeddingSpace {
    pub config: SpaceConfig,
    /// dim x F, orthonormal columns.
    pub projection: Array2<f32>,
    /// dim x V per-token directions.
    pub token_proj: Array2<f32>,
}

impl EmbeddingSpace {
    pub fn feature_dim(&self) -> usize {
        self.config.concepts + NUM_DOMAINS + RGB_HIST_BINS
    }

    pub fn new(config: SpaceConfig, vocab: &Vocabulary) -> Result<Self> {
        if vocab.concepts.len() != config.concepts {
            return Err(Error::invalid("vocabulary concept count does not match space config"));
        }
        let feat = config.concepts + NUM_DOMAINS + RGB_HIST_BINS;
        if config.dim < feat {
            return Err(Error::invalid(format!(
                "embedding dim {} must be >= feature dim {feat}",
                config.dim
            )));
        }
        let mut rng = rng_from_seed(derive_seed(config.seed, 0x5face));
        let raw = gaussian_matrix(&mut rng, config.dim, feat).mapv(|x| x as f64);
        let mut q = raw;
        linalg::orthonormalize_columns(&mut q)?;
        let projection = q.mapv(|x| x as f32);
        let token_proj = gaussian_matrix(&mut rng, config.dim, vocab.size());
        Ok(EmbeddingSpace { config, projection, token_proj })
    }

    pub fn concept_block(&self) -> std::ops::Range<usize> {
        0..self.config.concepts
    }

    pub fn domain_block(&self) -> std::ops::Range<usize> {
        self.config.concepts..self.config.concepts + NUM_DOMAINS
    }

    pub fn hist_block(&self) -> std::ops::Range<usize> {
        let start = self.config.concepts + NUM_DOMAINS;
        start..start + RGB_HIST_BINS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEmbedding {
    pub vec: Vec<f32>,
}

impl ImageEmbedding {
    pub fn as_array(&self) -> Array1<f32> {
        Array1::from(self.vec.clone())
    }

    pub fn from_array(v: &Array1<f32>) -> Self {
        ImageEmbedding { vec: v.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub pooled: Vec<f32>,
    /// One row per caption token.
    pub tokens: Vec<Vec<f32>>,
}

impl TextEmbedding {
    pub fn pooled_array(&self) -> Array1<f32> {
        Array1::from(self.pooled.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub caption_token_ids: Vec<usize>,
    pub patch: RasterPatch,
    pub domain: DomainLabel,
    pub concept_id: usize,
    pub palette: Vec<[f32; 3]>,
    pub text_emb: TextEmbedding,
    pub image_emb: ImageEmbedding,
    pub lab_hist: ColorHistogram,
}

// ---------------------------------------------------------------------------
// rendering

fn bilerp_grid(grid: &[f32], side: usize, u: f32, v: f32) -> f32 {
    let gu = u * side as f32;
    let gv = v * side as f32;
    let x0 = gu.floor() as usize % side;
    let y0 = gv.floor() as usize % side;
    let x1 = (x0 + 1) % side;
    let y1 = (y0 + 1) % side;
    let fx = gu - gu.floor();
    let fy = gv - gv.floor();
    let g = |x: usize, y: usize| grid[y * side + x];
    let a = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
    let b = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
    a * (1.0 - fy) + b * fy
}

fn shape_hit(kind: usize, dx: f32, dy: f32, r: f32) -> bool {
    match kind % 6 {
        0 => dx * dx + dy * dy <= r * r,                      // disc
        1 => dx.abs() <= r && dy.abs() <= r * 0.85,           // box
        2 => dy >= -r && dy <= r && dx.abs() <= (r - dy) / 2.0, // triangle
        3 => dx.abs() + dy.abs() <= r,                        // diamond
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r * 0.45) * (r * 0.45)      // ring
        }
        _ => dx.abs() <= r * 0.35 || dy.abs() <= r * 0.35,    // cross (clipped below)
    }
}

fn shape_hit_clipped(kind: usize, dx: f32, dy: f32, r: f32) -> bool {
    if dx.abs() > r || dy.abs() > r {
        return false;
    }
    shape_hit(kind, dx, dy, r)
}

fn validate_palette(palette: &[[f32; 3]]) -> Result<()> {
    if palette.is_empty() {
        return Err(Error::invalid("palette must be non-empty"));
    }
    for c in palette {
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("palette colors must lie in [0,1]^3"));
        }
    }
    Ok(())
}

/// Deterministic procedural patch for (concept, domain, palette, seed).
pub fn render_patch(
    vocab: &Vocabulary,
    concept_id: usize,
    domain: DomainLabel,
    palette: &[[f32; 3]],
    seed: u64,
    size: usize,
) -> Result<RasterPatch> {
    if concept_id >= vocab.concepts.len() {
        return Err(Error::invalid(format!("unknown concept id {concept_id}")));
    }
    validate_palette(palette)?;
    let mut rng = rng_from_seed(derive_seed(
        seed,
        (concept_id as u64) << 8 | domain.index() as u64,
    ));
    let mut patch = RasterPatch::filled(size, size, [1.0, 1.0, 1.0]);
    match domain {
        DomainLabel::Texture => render_texture(&mut patch, palette, &mut rng),
        DomainLabel::Vector => render_vector(&mut patch, concept_id, palette, &mut rng),
        DomainLabel::Isolated => render_isolated(&mut patch, concept_id, palette, &mut rng),
        DomainLabel::Photo => render_photo(&mut patch, concept_id, palette, &mut rng),
    }
    Ok(patch)
}

fn render_texture(patch: &mut RasterPatch, palette: &[[f32; 3]], rng: &mut ChaCha8Rng) {
    // two tiled low-frequency value-noise fields: one selects the palette
    // entry, the other modulates brightness slightly
    let side = 4usize;
    let select: Vec<f32> = (0..side * side).map(|_| rng.gen::<f32>()).collect();
    let shade: Vec<f32> = (0..side * side).map(|_| rng.gen::<f32>()).collect();
    let (w, h) = (patch.width, patch.height);
    for y in 0..h {
        for x in 0..w {
            let u = x as f32 / w as f32;
            let v = y as f32 / h as f32;
            let s = bilerp_grid(&select, side, u * 2.0, v * 2.0);
            let idx = ((s * palette.len() as f32) as usize).min(palette.len() - 1);
            let tint = (bilerp_grid(&shade, side, u * 3.0, v * 3.0) - 0.5) * 0.16;
            let base = palette[idx];
            patch.set(x, y, [base[0] + tint, base[1] + tint, base[2] + tint]);
        }
    }
}

fn render_vector(patch: &mut RasterPatch, concept_id: usize, palette: &[[f32; 3]], rng: &mut ChaCha8Rng) {
    let bg_shade = 0.82 + rng.gen::<f32>() * 0.1;
    let (w, h) = (patch.width, patch.height);
    for y in 0..h {
        for x in 0..w {
            patch.set(x, y, [bg_shade, bg_shade, bg_shade]);
        }
    }
    let count = 1 + rng.gen_range(0..3usize);
    for i in 0..count {
        let cx = (0.25 + 0.5 * rng.gen::<f32>()) * w as f32;
        let cy = (0.25 + 0.5 * rng.gen::<f32>()) * h as f32;
        let r = (0.12 + 0.12 * rng.gen::<f32>()) * w as f32;
        let color = palette[i % palette.len()];
        for y in 0..h {
            for x in 0..w {
                if shape_hit_clipped(concept_id, x as f32 - cx, y as f32 - cy, r) {
                    patch.set(x, y, color);
                }
            }
        }
    }
}

fn render_isolated(patch: &mut RasterPatch, concept_id: usize, palette: &[[f32; 3]], rng: &mut ChaCha8Rng) {
    // white background stays untouched on the border; shape area stays <= 40%
    let (w, h) = (patch.width, patch.height);
    let cx = w as f32 / 2.0;
    let cy = h as f32 / 2.0;
    let r = w as f32 * (0.24 + 0.04 * rng.gen::<f32>());
    let color = palette[0];
    for y in 0..h {
        for x in 0..w {
            if shape_hit_clipped(concept_id, x as f32 - cx, y as f32 - cy, r) {
                let edge = 1.0 - 0.12 * ((x as f32 - cx).abs() / r).min(1.0);
                patch.set(x, y, [color[0] * edge, color[1] * edge, color[2] * edge]);
            }
        }
    }
}

fn render_photo(patch: &mut RasterPatch, concept_id: usize, palette: &[[f32; 3]], rng: &mut ChaCha8Rng) {
    let (w, h) = (patch.width, patch.height);
    let top = palette[palette.len() - 1];
    let bottom = palette[0];
    let tilt = rng.gen::<f32>() * 0.6 - 0.3;
    for y in 0..h {
        for x in 0..w {
            let t = (y as f32 / h as f32 + tilt * x as f32 / w as f32).clamp(0.0, 1.0);
            let mix = |a: f32, b: f32| a * (1.0 - t) + b * t;
            patch.set(x, y, [
                mix(top[0] * 0.9 + 0.1, bottom[0]),
                mix(top[1] * 0.9 + 0.1, bottom[1]),
                mix(top[2] * 0.9 + 0.1, bottom[2]),
            ]);
        }
    }
    let cx = (0.3 + 0.4 * rng.gen::<f32>()) * w as f32;
    let cy = (0.3 + 0.4 * rng.gen::<f32>()) * h as f32;
    let r = w as f32 * (0.15 + 0.1 * rng.gen::<f32>());
    let color = palette[0];
    for y in 0..h {
        for x in 0..w {
            if shape_hit_clipped(concept_id, x as f32 - cx, y as f32 - cy, r) {
                patch.set(x, y, [color[0] * 0.85, color[1] * 0.85, color[2] * 0.85]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// features and encodings

fn rgb_bin(color: [f32; 3]) -> usize {
    let q = |c: f32| ((c * RGB_HIST_SIDE as f32) as usize).min(RGB_HIST_SIDE - 1);
    (q(color[0]) * RGB_HIST_SIDE + q(color[1])) * RGB_HIST_SIDE + q(color[2])
}

/// Coarse 3x3x3 RGB histogram of a patch, summing to 1.
pub fn coarse_rgb_histogram(patch: &RasterPatch) -> Vec<f32> {
    let mut hist = vec![0.0f32; RGB_HIST_BINS];
    for (r, g, b) in patch.pixels_iter() {
        hist[rgb_bin([r, g, b])] += 1.0;
    }
    let n = patch.pixel_count() as f32;
    for v in hist.iter_mut() {
        *v /= n;
    }
    hist
}

/// `[one-hot concept | one-hot domain | rgb histogram]`.
pub fn image_features(
    space: &EmbeddingSpace,
    patch: &RasterPatch,
    concept_id: usize,
    domain: DomainLabel,
) -> Result<Array1<f32>> {
    if concept_id >= space.config.concepts {
        return Err(Error::invalid(format!("unknown concept id {concept_id}")));
    }
    let mut f = Array1::<f32>::zeros(space.feature_dim());
    f[concept_id] = 1.0;
    f[space.config.concepts + domain.index()] = 1.0;
    let hist = coarse_rgb_histogram(patch);
    for (i, v) in hist.iter().enumerate() {
        f[space.config.concepts + NUM_DOMAINS + i] = *v;
    }
    Ok(f)
}

/// normalize(projection . features + sigma . gaussian).
pub fn encode_image<R: Rng>(
    space: &EmbeddingSpace,
    patch: &RasterPatch,
    concept_id: usize,
    domain: DomainLabel,
    rng: &mut R,
) -> Result<ImageEmbedding> {
    let f = image_features(space, patch, concept_id, domain)?;
    let mut v = space.projection.dot(&f);
    if space.config.noise_sigma > 0.0 {
        let noise = util::gaussian_vector(rng, space.config.dim);
        v = v + noise * space.config.noise_sigma;
    }
    Ok(ImageEmbedding::from_array(&normalize(&v)))
}

/// Pooled text vector plus per-token encodings.
///
/// The pooled vector projects a masked feature vector: concept one-hot from
/// the concept token, zero domain block, and a one-hot RGB histogram for a
/// named color word if any.
pub fn encode_text(
    space: &EmbeddingSpace,
    vocab: &Vocabulary,
    caption_token_ids: &[usize],
) -> Result<TextEmbedding> {
    if caption_token_ids.is_empty() {
        return Err(Error::invalid("caption must contain at least one token"));
    }
    let mut f = Array1::<f32>::zeros(space.feature_dim());
    let mut saw_concept = false;
    for &id in caption_token_ids {
        if id >= vocab.size() {
            return Err(Error::invalid(format!("unknown token id {id}")));
        }
        if let Some(c) = vocab.concept_of_token(id) {
            if !saw_concept {
                f[c] = 1.0;
                saw_concept = true;
            }
        }
        if let Some(rgb) = vocab.color_of_token(id) {
            f[space.config.concepts + NUM_DOMAINS + rgb_bin(rgb)] = 1.0;
        }
    }
    let pooled = normalize(&space.projection.dot(&f));
    let tokens = caption_token_ids
        .iter()
        .map(|&id| {
            let col = space.token_proj.column(id).to_owned();
            normalize(&col).to_vec()
        })
        .collect();
    Ok(TextEmbedding { pooled: pooled.to_vec(), tokens })
}

/// Attributes recovered from an embedding via the transpose projection.
#[derive(Debug, Clone)]
pub struct DecodedEmbedding {
    pub concept_id: usize,
    pub domain: DomainLabel,
    /// Nonnegative, renormalized 27-bin RGB histogram.
    pub palette_hist: Vec<f32>,
}

impl DecodedEmbedding {
    /// Bin-center colors of the `k` heaviest histogram bins.
    pub fn palette(&self, k: usize) -> Vec<[f32; 3]> {
        let mut order: Vec<usize> = (0..RGB_HIST_BINS).collect();
        order.sort_by(|a, b| {
            self.palette_hist[*b]
                .partial_cmp(&self.palette_hist[*a])
                .unwrap()
                .then(a.cmp(b))
        });
        order
            .into_iter()
            .take(k)
            .filter(|i| self.palette_hist[*i] > 0.0)
            .map(|i| {
                let r = i / (RGB_HIST_SIDE * RGB_HIST_SIDE);
                let g = (i / RGB_HIST_SIDE) % RGB_HIST_SIDE;
                let b = i % RGB_HIST_SIDE;
                let c = |q: usize| (q as f32 + 0.5) / RGB_HIST_SIDE as f32;
                [c(r), c(g), c(b)]
            })
            .collect()
    }
}

pub fn decode_embedding(space: &EmbeddingSpace, emb: &ImageEmbedding) -> Result<DecodedEmbedding> {
    let v = emb.as_array();
    if v.len() != space.config.dim {
        return Err(Error::invalid("embedding width does not match space"));
    }
    let f = space.projection.t().dot(&v);
    let argmax = |range: std::ops::Range<usize>| {
        let mut best = range.start;
        for i in range.clone() {
            if f[i] > f[best] {
                best = i;
            }
        }
        best - range.start
    };
    let concept_id = argmax(space.concept_block());
    let domain = DomainLabel::ALL[argmax(space.domain_block())];
    let hist_raw: Vec<f32> = space.hist_block().map(|i| f[i].max(0.0)).collect();
    let total: f32 = hist_raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::numeric("degenerate embedding: recovered histogram is empty"));
    }
    let palette_hist = hist_raw.into_iter().map(|v| v / total).collect();
    Ok(DecodedEmbedding { concept_id, domain, palette_hist })
}

/// Companion render for a decoded embedding (top-k bins as palette).
pub fn render_decoded(
    vocab: &Vocabulary,
    space: &EmbeddingSpace,
    decoded: &DecodedEmbedding,
    seed: u64,
) -> Result<RasterPatch> {
    let palette = decoded.palette(3);
    render_patch(vocab, decoded.concept_id, decoded.domain, &palette, seed, space.config.patch_size)
}

// ---------------------------------------------------------------------------
// dataset generation

pub const COLOR_WORD_PROB: f64 = 0.3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifestInfo {
    pub n: usize,
    pub seed: u64,
    pub domain_mix: [f64; NUM_DOMAINS],
    pub space: SpaceConfig,
    pub domain_counts: [usize; NUM_DOMAINS],
}

fn gen_record(
    space: &EmbeddingSpace,
    vocab: &Vocabulary,
    id: usize,
    domain_mix: &[f64; NUM_DOMAINS],
    seed: u64,
) -> Result<DatasetRecord> {
    let mut rng = rng_from_seed(derive_seed(seed, id as u64));
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut domain = DomainLabel::Photo;
    for (i, p) in domain_mix.iter().enumerate() {
        acc += p;
        if u < acc {
            domain = DomainLabel::ALL[i];
            break;
        }
    }
    let concept_id = rng.gen_range(0..space.config.concepts);
    let mut caption = vec![vocab.concept_token(concept_id)?];
    let with_color = rng.gen::<f64>() < COLOR_WORD_PROB;
    let palette: Vec<[f32; 3]> = if with_color {
        let w = &vocab.color_words[rng.gen_range(0..vocab.color_words.len())];
        caption.push(vocab.color_token(w)?);
        vec![vocab.color_of_token(vocab.token_id(w)?).unwrap()]
    } else {
        let count = 1 + rng.gen_range(0..3usize);
        (0..count).map(|_| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]).collect()
    };
    let patch = render_patch(vocab, concept_id, domain, &palette, rng.gen::<u64>(), space.config.patch_size)?;
    let text_emb = encode_text(space, vocab, &caption)?;
    let image_emb = encode_image(space, &patch, concept_id, domain, &mut rng)?;
    let lab_hist = colorlab::lab_histogram(&patch, colorlab::TOY_BINS)?;
    Ok(DatasetRecord {
        id,
        caption_token_ids: caption,
        patch,
        domain,
        concept_id,
        palette,
        text_emb,
        image_emb,
        lab_hist,
    })
}

/// Deterministic dataset of procedural records; shardable by record index.
pub fn gen_dataset(
    space: &EmbeddingSpace,
    vocab: &Vocabulary,
    n: usize,
    domain_mix: [f64; NUM_DOMAINS],
    seed: u64,
) -> Result<(Vec<DatasetRecord>, DatasetManifestInfo)> {
    if n < 1 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let total: f64 = domain_mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 || domain_mix.iter().any(|p| *p < 0.0) {
        return Err(Error::invalid("domain mix must be nonnegative and sum to 1"));
    }
    use rayon::prelude::*;
    let records: Result<Vec<DatasetRecord>> = (0..n)
        .into_par_iter()
        .map(|id| gen_record(space, vocab, id, &domain_mix, seed))
        .collect();
    let records = records?;
    let mut domain_counts = [0usize; NUM_DOMAINS];
    for r in &records {
        domain_counts[r.domain.index()] += 1;
    }
    let info = DatasetManifestInfo { n, seed, domain_mix, space: space.config, domain_counts };
    Ok((records, info))
}
