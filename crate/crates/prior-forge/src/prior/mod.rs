//! The causal-transformer diffusion prior: conditioning sequence assembly,
//! x0 prediction from the final query position, and classifier-free guidance
//! with learned null tokens.

pub mod net;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::colorlab::ColorToken;
use crate::diffusion::{cfg_combine, ScheduleKind};
use crate::error::{Error, Result};
use crate::synthspace::TextEmbedding;
use crate::util::{gaussian_matrix, gaussian_vector, rng_from_seed};
use net::{Attention, Block, BlockCache, LayerNorm, LayerNormCache, Linear};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Total text slots: the pooled embedding plus per-token encodings.
    pub max_text_tokens: usize,
    pub color_conditioned: bool,
    pub schedule_kind: ScheduleKind,
    pub timesteps: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_text_tokens: 8,
            color_conditioned: false,
            schedule_kind: ScheduleKind::Cosine,
            timesteps: 1000,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.max_text_tokens < 1 {
            return Err(Error::invalid("prior config sizes must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid("width must be divisible by heads"));
        }
        Ok(())
    }

    /// Slot index of the color token, when color conditioned.
    pub fn color_slot(&self) -> Option<usize> {
        self.color_conditioned.then_some(0)
    }

    pub fn pooled_slot(&self) -> usize {
        usize::from(self.color_conditioned)
    }

    pub fn token_slots(&self) -> std::ops::Range<usize> {
        let start = self.pooled_slot() + 1;
        start..start + self.max_text_tokens - 1
    }

    pub fn time_slot(&self) -> usize {
        self.token_slots().end
    }

    pub fn noised_slot(&self) -> usize {
        self.time_slot() + 1
    }

    pub fn query_slot(&self) -> usize {
        self.noised_slot() + 1
    }

    pub fn seq_len(&self) -> usize {
        self.query_slot() + 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorParams {
    pub config: PriorConfig,
    /// Learned per-slot position/type embeddings, seq_len x width.
    pub slot_emb: Array2<f32>,
    pub time_proj: Linear,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub out_proj: Linear,
    pub null_text_pooled: Array1<f32>,
    pub null_text_fill: Array1<f32>,
    pub null_color: Array1<f32>,
    pub query: Array1<f32>,
}

impl PriorParams {
    pub fn init(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let m = d * config.mlp_ratio;
        let mut rng = rng_from_seed(seed);
        let mut lin = |inp: usize, out: usize| Linear {
            w: gaussian_matrix(&mut rng, inp, out).mapv(|x| x * 0.02),
            b: Array1::zeros(out),
        };
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                attn: Attention {
                    wq: lin(d, d),
                    wk: lin(d, d),
                    wv: lin(d, d),
                    // zero-init so residual branches start as identity
                    wo: Linear::zeros(d, d),
                    heads: config.heads,
                },
                ln2: LayerNorm::new(d),
                fc1: lin(d, m),
                fc2: Linear::zeros(m, d),
            })
            .collect();
        let time_proj = lin(d, d);
        let slot_emb = gaussian_matrix(&mut rng, config.seq_len(), d).mapv(|x| x * 0.02);
        let null_text_pooled = gaussian_vector(&mut rng, d).mapv(|x| x * 0.02);
        let null_text_fill = gaussian_vector(&mut rng, d).mapv(|x| x * 0.02);
        let null_color = gaussian_vector(&mut rng, d).mapv(|x| x * 0.02);
        let query = gaussian_vector(&mut rng, d).mapv(|x| x * 0.02);
        Ok(PriorParams {
            config,
            slot_emb,
            time_proj,
            blocks,
            final_ln: LayerNorm::new(d),
            out_proj: Linear::zeros(d, d),
            null_text_pooled,
            null_text_fill,
            null_color,
            query,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.config.width;
        let m = d * self.config.mlp_ratio;
        PriorParams {
            config: self.config,
            slot_emb: Array2::zeros(self.slot_emb.dim()),
            time_proj: Linear::zeros(d, d),
            blocks: (0..self.config.depth)
                .map(|_| Block {
                    ln1: LayerNorm::zeros(d),
                    attn: Attention {
                        wq: Linear::zeros(d, d),
                        wk: Linear::zeros(d, d),
                        wv: Linear::zeros(d, d),
                        wo: Linear::zeros(d, d),
                        heads: self.config.heads,
                    },
                    ln2: LayerNorm::zeros(d),
                    fc1: Linear::zeros(d, m),
                    fc2: Linear::zeros(m, d),
                })
                .collect(),
            final_ln: LayerNorm::zeros(d),
            out_proj: Linear::zeros(d, d),
            null_text_pooled: Array1::zeros(d),
            null_text_fill: Array1::zeros(d),
            null_color: Array1::zeros(d),
            query: Array1::zeros(d),
        }
    }

    /// All parameter tensors as mutable flat slices, in a fixed order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        out.push(self.slot_emb.as_slice_mut().unwrap());
        out.push(self.time_proj.w.as_slice_mut().unwrap());
        out.push(self.time_proj.b.as_slice_mut().unwrap());
        for b in self.blocks.iter_mut() {
            out.push(b.ln1.gamma.as_slice_mut().unwrap());
            out.push(b.ln1.beta.as_slice_mut().unwrap());
            out.push(b.attn.wq.w.as_slice_mut().unwrap());
            out.push(b.attn.wq.b.as_slice_mut().unwrap());
            out.push(b.attn.wk.w.as_slice_mut().unwrap());
            out.push(b.attn.wk.b.as_slice_mut().unwrap());
            out.push(b.attn.wv.w.as_slice_mut().unwrap());
            out.push(b.attn.wv.b.as_slice_mut().unwrap());
            out.push(b.attn.wo.w.as_slice_mut().unwrap());
            out.push(b.attn.wo.b.as_slice_mut().unwrap());
            out.push(b.ln2.gamma.as_slice_mut().unwrap());
            out.push(b.ln2.beta.as_slice_mut().unwrap());
            out.push(b.fc1.w.as_slice_mut().unwrap());
            out.push(b.fc1.b.as_slice_mut().unwrap());
            out.push(b.fc2.w.as_slice_mut().unwrap());
            out.push(b.fc2.b.as_slice_mut().unwrap());
        }
        out.push(self.final_ln.gamma.as_slice_mut().unwrap());
        out.push(self.final_ln.beta.as_slice_mut().unwrap());
        out.push(self.out_proj.w.as_slice_mut().unwrap());
        out.push(self.out_proj.b.as_slice_mut().unwrap());
        out.push(self.null_text_pooled.as_slice_mut().unwrap());
        out.push(self.null_text_fill.as_slice_mut().unwrap());
        out.push(self.null_color.as_slice_mut().unwrap());
        out.push(self.query.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        let mut clone = self.clone();
        clone.param_slices_mut().iter().map(|s| s.len()).sum()
    }

    /// Accumulate `other * scale` into self (used to reduce per-record grads).
    pub fn accumulate(&mut self, other: &mut PriorParams, scale: f32) {
        let mut dst = self.param_slices_mut();
        let src = other.param_slices_mut();
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                *dv += sv * scale;
            }
        }
    }
}

/// Sinusoidal features of a timestep: d/2 sin then d/2 cos entries over
/// geometrically spaced periods from 1 to 1e4.
pub fn timestep_features(t: usize, d: usize) -> Array1<f32> {
    let half = d / 2;
    let mut out = Array1::zeros(d);
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let period = 1e4f64.powf(exponent);
        let angle = t as f64 / period;
        out[i] = angle.sin() as f32;
        out[half + i] = angle.cos() as f32;
    }
    out
}

/// Timestep token: learned projection of the sinusoidal features.
pub fn timestep_embedding(params: &PriorParams, t: usize) -> Array1<f32> {
    let feats = timestep_features(t, params.config.width);
    let row = feats.insert_axis(ndarray::Axis(0));
    params.time_proj.forward(&row).row(0).to_owned()
}

/// Where each learned vector landed in a built sequence; drives gradient
/// routing back into the null/query/time parameters.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub null_color_used: bool,
    pub null_pooled_used: bool,
    /// Token slots filled with the null text fill vector.
    pub fill_slots: Vec<usize>,
    pub time_feats: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct BuiltSequence {
    /// seq_len x width, slot embeddings already added.
    pub x: Array2<f32>,
    pub layout: SequenceLayout,
}

/// Assembles `[color?, pooled, w_1.., t, z_noised, query]` with dropout
/// substitutions. Color is never kept while text is dropped.
pub fn build_sequence(
    params: &PriorParams,
    text: &TextEmbedding,
    color: Option<&ColorToken>,
    t: usize,
    z_noised: &Array1<f32>,
    drop_text: bool,
    drop_color: bool,
) -> Result<BuiltSequence> {
    let cfg = &params.config;
    let d = cfg.width;
    if color.is_some() && !cfg.color_conditioned {
        return Err(Error::invalid("color token provided to a non-color-conditioned prior"));
    }
    if t > cfg.timesteps {
        return Err(Error::invalid(format!("timestep {t} beyond schedule {}", cfg.timesteps)));
    }
    if z_noised.len() != d || text.pooled.len() != d {
        return Err(Error::invalid("sequence inputs do not match model width"));
    }
    if drop_text && !drop_color && cfg.color_conditioned {
        return Err(Error::invalid("color must not be kept while text is dropped"));
    }
    let mut x = Array2::<f32>::zeros((cfg.seq_len(), d));
    let mut layout = SequenceLayout {
        null_color_used: false,
        null_pooled_used: false,
        fill_slots: Vec::new(),
        time_feats: timestep_features(t, d),
    };
    let set_row = |x: &mut Array2<f32>, slot: usize, v: &Array1<f32>| {
        x.row_mut(slot).assign(v);
    };
    if let Some(slot) = cfg.color_slot() {
        match color {
            Some(tok) if !drop_color => {
                if tok.vec.len() != d {
                    return Err(Error::invalid("color token width does not match model"));
                }
                set_row(&mut x, slot, &tok.as_array());
            }
            _ => {
                set_row(&mut x, slot, &params.null_color);
                layout.null_color_used = true;
            }
        }
    }
    if drop_text {
        set_row(&mut x, cfg.pooled_slot(), &params.null_text_pooled);
        layout.null_pooled_used = true;
        for slot in cfg.token_slots() {
            set_row(&mut x, slot, &params.null_text_fill);
            layout.fill_slots.push(slot);
        }
    } else {
        set_row(&mut x, cfg.pooled_slot(), &text.pooled_array());
        for (i, slot) in cfg.token_slots().enumerate() {
            match text.tokens.get(i) {
                Some(tok) => {
                    if tok.len() != d {
                        return Err(Error::invalid("text token width does not match model"));
                    }
                    x.row_mut(slot).assign(&Array1::from(tok.clone()));
                }
                None => {
                    set_row(&mut x, slot, &params.null_text_fill);
                    layout.fill_slots.push(slot);
                }
            }
        }
    }
    let time_row = layout.time_feats.clone().insert_axis(ndarray::Axis(0));
    let projected = params.time_proj.forward(&time_row);
    x.row_mut(cfg.time_slot()).assign(&projected.row(0));
    set_row(&mut x, cfg.noised_slot(), z_noised);
    set_row(&mut x, cfg.query_slot(), &params.query);
    x += &params.slot_emb;
    Ok(BuiltSequence { x, layout })
}

pub struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub final_ln: LayerNormCache,
    pub final_out: Array2<f32>,
}

/// Transformer forward; output is the unnormalized x0 prediction read from
/// the query position.
pub fn denoise(params: &PriorParams, seq: &BuiltSequence) -> Result<Array1<f32>> {
    let (out, _) = denoise_with_cache(params, seq)?;
    Ok(out)
}

pub fn denoise_with_cache(
    params: &PriorParams,
    seq: &BuiltSequence,
) -> Result<(Array1<f32>, ForwardCache)> {
    let mut x = seq.x.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (y, cache) = block.forward(&x);
        x = y;
        caches.push(cache);
    }
    let (normed, ln_cache) = params.final_ln.forward(&x);
    let q = params.config.query_slot();
    let hidden = normed.row(q).to_owned().insert_axis(ndarray::Axis(0));
    let out = params.out_proj.forward(&hidden).row(0).to_owned();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite activations in denoiser output"));
    }
    Ok((out, ForwardCache { blocks: caches, final_ln: ln_cache, final_out: normed }))
}

/// Hidden states after each block; used by causality checks.
pub fn hidden_states(params: &PriorParams, seq: &BuiltSequence) -> Vec<Array2<f32>> {
    let mut x = seq.x.clone();
    let mut out = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (y, _) = block.forward(&x);
        x = y;
        out.push(x.clone());
    }
    out
}

/// Backpropagates d(loss)/d(output) through the network, accumulating into
/// `grads` (a zeroed PriorParams mirror).
pub fn denoise_backward(
    params: &PriorParams,
    seq: &BuiltSequence,
    cache: &ForwardCache,
    d_out: &Array1<f32>,
    grads: &mut PriorParams,
) {
    let cfg = &params.config;
    let q = cfg.query_slot();
    let dy_row = d_out.clone().insert_axis(ndarray::Axis(0));
    let hidden = cache.final_out.row(q).to_owned().insert_axis(ndarray::Axis(0));
    let d_hidden = params.out_proj.backward(&hidden, &dy_row, &mut grads.out_proj);
    let mut d_normed = Array2::<f32>::zeros(cache.final_out.dim());
    d_normed.row_mut(q).assign(&d_hidden.row(0));
    let mut dx = params.final_ln.backward(&cache.final_ln, &d_normed, &mut grads.final_ln);
    for i in (0..params.blocks.len()).rev() {
        dx = params.blocks[i].backward(&cache.blocks[i], &dx, &mut grads.blocks[i]);
    }
    // route the input gradient into learned vectors
    grads.slot_emb += &dx;
    let layout = &seq.layout;
    if layout.null_color_used {
        if let Some(slot) = cfg.color_slot() {
            grads.null_color += &dx.row(slot);
        }
    }
    if layout.null_pooled_used {
        grads.null_text_pooled += &dx.row(cfg.pooled_slot());
    }
    for &slot in &layout.fill_slots {
        grads.null_text_fill += &dx.row(slot);
    }
    grads.query += &dx.row(cfg.query_slot());
    let feats = layout.time_feats.clone().insert_axis(ndarray::Axis(0));
    let d_time = dx.row(cfg.time_slot()).to_owned().insert_axis(ndarray::Axis(0));
    let _ = params.time_proj.backward(&feats, &d_time, &mut grads.time_proj);
}

/// Two-pass guided prediction: fully conditioned vs fully null, combined by
/// the guidance scale. A color model queried without a color token uses the
/// text-only pass as its conditional arm.
pub fn cfg_denoise(
    params: &PriorParams,
    text: &TextEmbedding,
    color: Option<&ColorToken>,
    t: usize,
    z_noised: &Array1<f32>,
    guidance_scale: f32,
) -> Result<Array1<f32>> {
    let cond_seq = build_sequence(params, text, color, t, z_noised, false, color.is_none())?;
    let cond = denoise(params, &cond_seq)?;
    if guidance_scale == 1.0 {
        return Ok(cond);
    }
    let uncond_seq = build_sequence(params, text, None, t, z_noised, true, true)?;
    let uncond = denoise(params, &uncond_seq)?;
    if guidance_scale == 0.0 {
        return Ok(uncond);
    }
    Ok(cfg_combine(&uncond, &cond, guidance_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthspace::{encode_text, EmbeddingSpace, SpaceConfig, Vocabulary};
    use crate::util::{gaussian_vector, rng_from_seed};

    fn toy_text() -> (EmbeddingSpace, Vocabulary, TextEmbedding) {
        let vocab = Vocabulary::default();
        let space = EmbeddingSpace::new(SpaceConfig::default(), &vocab).unwrap();
        let caption = vec![vocab.concept_token(2).unwrap()];
        let text = encode_text(&space, &vocab, &caption).unwrap();
        (space, vocab, text)
    }

    fn color_token_64() -> ColorToken {
        let mut vec = vec![0.0f32; 64];
        vec[10] = 1.0;
        ColorToken { vec }
    }

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features(0, 16);
        for i in 0..8 {
            assert_eq!(f[i], 0.0);
            assert_eq!(f[8 + i], 1.0);
        }
    }

    #[test]
    fn timestep_features_distinct_and_deterministic() {
        let a = timestep_features(17, 64);
        let b = timestep_features(17, 64);
        assert_eq!(a, b);
        let c = timestep_features(18, 64);
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn sequence_lengths() {
        let cfg = PriorConfig { color_conditioned: true, ..PriorConfig::default() };
        assert_eq!(cfg.seq_len(), 12);
        let cfg = PriorConfig::default();
        assert_eq!(cfg.seq_len(), 11);
    }

    #[test]
    fn build_sequence_slots() {
        let cfg = PriorConfig { color_conditioned: true, ..PriorConfig::default() };
        let params = PriorParams::init(cfg, 1).unwrap();
        let (_, _, text) = toy_text();
        let z = gaussian_vector(&mut rng_from_seed(0), 64);
        let tok = color_token_64();
        let seq = build_sequence(&params, &text, Some(&tok), 5, &z, false, false).unwrap();
        assert_eq!(seq.x.nrows(), 12);
        assert!(!seq.layout.null_color_used);
        // fully dropped: every content slot comes from learned vectors
        let seq = build_sequence(&params, &text, None, 5, &z, true, true).unwrap();
        assert!(seq.layout.null_color_used && seq.layout.null_pooled_used);
        assert_eq!(seq.layout.fill_slots.len(), cfg.max_text_tokens - 1);
        let pooled_row = seq.x.row(cfg.pooled_slot());
        for (i, v) in pooled_row.iter().enumerate() {
            let want = params.null_text_pooled[i] + params.slot_emb[[cfg.pooled_slot(), i]];
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn color_to_non_color_model_rejected() {
        let params = PriorParams::init(PriorConfig::default(), 1).unwrap();
        let (_, _, text) = toy_text();
        let z = gaussian_vector(&mut rng_from_seed(0), 64);
        let tok = color_token_64();
        assert!(build_sequence(&params, &text, Some(&tok), 5, &z, false, false).is_err());
    }

    #[test]
    fn color_kept_without_text_rejected() {
        let cfg = PriorConfig { color_conditioned: true, ..PriorConfig::default() };
        let params = PriorParams::init(cfg, 1).unwrap();
        let (_, _, text) = toy_text();
        let z = gaussian_vector(&mut rng_from_seed(0), 64);
        let tok = color_token_64();
        assert!(build_sequence(&params, &text, Some(&tok), 5, &z, true, false).is_err());
    }

    #[test]
    fn denoise_finite_and_deterministic() {
        let params = PriorParams::init(PriorConfig::default(), 3).unwrap();
        let (_, _, text) = toy_text();
        let z = Array1::zeros(64);
        let seq = build_sequence(&params, &text, None, 0, &z, false, false).unwrap();
        let a = denoise(&params, &seq).unwrap();
        let b = denoise(&params, &seq).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn causal_mask_every_layer() {
        let params = PriorParams::init(PriorConfig::default(), 7).unwrap();
        let (_, _, text) = toy_text();
        let mut rng = rng_from_seed(9);
        let z = gaussian_vector(&mut rng, 64);
        let seq = build_sequence(&params, &text, None, 11, &z, false, false).unwrap();
        let base = hidden_states(&params, &seq);
        for j in 1..seq.x.nrows() {
            let mut perturbed = BuiltSequence {
                x: seq.x.clone(),
                layout: seq.layout.clone(),
            };
            for c in 0..64 {
                perturbed.x[[j, c]] += 0.5;
            }
            let got = hidden_states(&params, &perturbed);
            for (layer, (hb, hg)) in base.iter().zip(got.iter()).enumerate() {
                for i in 0..j {
                    for c in 0..64 {
                        assert_eq!(
                            hb[[i, c]],
                            hg[[i, c]],
                            "layer {layer} pos {i} changed when perturbing {j}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn cfg_scale_identities_and_collinearity() {
        let cfg = PriorConfig { color_conditioned: true, ..PriorConfig::default() };
        let params = PriorParams::init(cfg, 5).unwrap();
        let (_, _, text) = toy_text();
        let mut rng = rng_from_seed(4);
        let z = gaussian_vector(&mut rng, 64);
        let tok = color_token_64();
        let one = cfg_denoise(&params, &text, Some(&tok), 9, &z, 1.0).unwrap();
        let cond_seq = build_sequence(&params, &text, Some(&tok), 9, &z, false, false).unwrap();
        assert_eq!(one, denoise(&params, &cond_seq).unwrap());
        let zero = cfg_denoise(&params, &text, Some(&tok), 9, &z, 0.0).unwrap();
        let uncond_seq = build_sequence(&params, &text, None, 9, &z, true, true).unwrap();
        assert_eq!(zero, denoise(&params, &uncond_seq).unwrap());
        let two = cfg_denoise(&params, &text, Some(&tok), 9, &z, 2.0).unwrap();
        for i in 0..64 {
            let lhs = two[i] - one[i];
            let rhs = one[i] - zero[i];
            assert!((lhs - rhs).abs() < 1e-4, "not collinear at {i}");
        }
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = PriorConfig { color_conditioned: true, ..PriorConfig::default() };
        let params = PriorParams::init(cfg, 0).unwrap();
        let d = 64usize;
        let m = 4 * d;
        let s = cfg.seq_len();
        let per_block = 4 * (d * d + d) + 2 * (2 * d) + (d * m + m) + (m * d + d);
        let want = s * d              // slot embeddings
            + (d * d + d)             // time projection
            + 4 * per_block
            + 2 * d                   // final layernorm
            + (d * d + d)             // output projection
            + 4 * d;                  // null pooled/fill/color + query
        assert_eq!(params.param_count(), want);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // small config to keep the numeric check tight
        let cfg = PriorConfig {
            width: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            max_text_tokens: 3,
            color_conditioned: true,
            schedule_kind: ScheduleKind::Cosine,
            timesteps: 50,
        };
        let mut params = PriorParams::init(cfg, 12).unwrap();
        let mut rng = rng_from_seed(1);
        // the residual-branch and output weights start at zero; randomize them
        // so gradients flow through every layer
        params.out_proj.w = crate::util::gaussian_matrix(&mut rng, 16, 16).mapv(|x| x * 0.3);
        for b in params.blocks.iter_mut() {
            b.attn.wo.w = crate::util::gaussian_matrix(&mut rng, 16, 16).mapv(|x| x * 0.3);
            b.fc2.w = crate::util::gaussian_matrix(&mut rng, 32, 16).mapv(|x| x * 0.3);
        }
        let text = TextEmbedding {
            pooled: gaussian_vector(&mut rng, 16).to_vec(),
            tokens: vec![gaussian_vector(&mut rng, 16).to_vec()],
        };
        let z = gaussian_vector(&mut rng, 16);
        let target = gaussian_vector(&mut rng, 16);
        let tok = ColorToken { vec: gaussian_vector(&mut rng, 16).to_vec() };
        let loss = |p: &PriorParams| -> f64 {
            let seq = build_sequence(p, &text, Some(&tok), 7, &z, false, false).unwrap();
            let out = denoise(p, &seq).unwrap();
            out.iter().zip(target.iter()).map(|(a, t)| ((a - t) as f64).powi(2)).sum()
        };
        let seq = build_sequence(&params, &text, Some(&tok), 7, &z, false, false).unwrap();
        let (out, cache) = denoise_with_cache(&params, &seq).unwrap();
        let d_out = out
            .iter()
            .zip(target.iter())
            .map(|(a, t)| 2.0 * (a - t))
            .collect::<Array1<f32>>();
        let mut grads = params.zeros_like();
        denoise_backward(&params, &seq, &cache, &d_out, &mut grads);

        let h = 1e-3f32;
        let check = |mutate: &dyn Fn(&mut PriorParams) -> &mut f32, ana: f32| {
            let mut pp = params.clone();
            *mutate(&mut pp) += h;
            let mut pm = params.clone();
            *mutate(&mut pm) -= h;
            let num = (loss(&pp) - loss(&pm)) / (2.0 * h as f64);
            assert!(
                (num - ana as f64).abs() < 3e-2 * (1.0 + ana.abs() as f64),
                "grad mismatch: fd {num} vs {ana}"
            );
        };
        check(&|p| &mut p.slot_emb[[0, 1]], grads.slot_emb[[0, 1]]);
        check(&|p| &mut p.query[3], grads.query[3]);
        check(&|p| &mut p.time_proj.w[[2, 5]], grads.time_proj.w[[2, 5]]);
        check(&|p| &mut p.out_proj.b[0], grads.out_proj.b[0]);
        check(&|p| &mut p.blocks[0].attn.wv.w[[1, 1]], grads.blocks[0].attn.wv.w[[1, 1]]);
        check(&|p| &mut p.blocks[1].fc1.w[[4, 7]], grads.blocks[1].fc1.w[[4, 7]]);
        check(&|p| &mut p.final_ln.gamma[2], grads.final_ln.gamma[2]);
        // null vectors only receive gradient when used
        let seq_u = build_sequence(&params, &text, None, 7, &z, true, true).unwrap();
        let (out_u, cache_u) = denoise_with_cache(&params, &seq_u).unwrap();
        let d_u = out_u
            .iter()
            .zip(target.iter())
            .map(|(a, t)| 2.0 * (a - t))
            .collect::<Array1<f32>>();
        let mut grads_u = params.zeros_like();
        denoise_backward(&params, &seq_u, &cache_u, &d_u, &mut grads_u);
        assert!(grads.null_color.iter().all(|v| *v == 0.0));
        assert!(grads_u.null_color.iter().any(|v| *v != 0.0));
        let loss_u = |p: &PriorParams| -> f64 {
            let seq = build_sequence(p, &text, None, 7, &z, true, true).unwrap();
            let out = denoise(p, &seq).unwrap();
            out.iter().zip(target.iter()).map(|(a, t)| ((a - t) as f64).powi(2)).sum()
        };
        let mut pp = params.clone();
        pp.null_text_fill[2] += h;
        let mut pm = params.clone();
        pm.null_text_fill[2] -= h;
        let num = (loss_u(&pp) - loss_u(&pm)) / (2.0 * h as f64);
        let ana = grads_u.null_text_fill[2] as f64;
        assert!((num - ana).abs() < 3e-2 * (1.0 + ana.abs()), "null fill grad {num} vs {ana}");
    }
}
