//! Inference: DDIM sampling of embeddings from one or more priors with
//! classifier-free guidance, best-of-k reranking against the prompt, prior
//! composition along a shared trajectory, and prompt-to-patch generation
//! through the analytic decoder.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::colorlab::{self, ColorToken};
use crate::diffusion::{ddim_step, ddim_timesteps, make_cosine_schedule, make_linear_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::prior::{cfg_denoise, PriorParams};
use crate::synthspace::{
    decode_embedding, encode_text, render_decoded, EmbeddingSpace, ImageEmbedding, RasterPatch,
    TextEmbedding, Vocabulary,
};
use crate::util::{cosine, derive_seed, gaussian_vector, normalize, rng_from_seed};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f32,
    pub k: usize,
    pub seed: u64,
    pub renormalize_output: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 100, guidance_scale: 3.0, k: 10, seed: 0, renormalize_output: true }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.k < 1 {
            return Err(Error::invalid("steps and k must be >= 1"));
        }
        Ok(())
    }
}

/// Rebuilds the noise schedule a prior was trained with.
pub fn schedule_for(params: &PriorParams) -> Result<NoiseSchedule> {
    match params.config.schedule_kind {
        ScheduleKind::Cosine => make_cosine_schedule(params.config.timesteps, 0.008),
        ScheduleKind::Linear => make_linear_schedule(params.config.timesteps, 1e-4, 0.02),
    }
}

/// One guided DDIM trajectory from Gaussian noise, deterministic in `seed`.
pub fn sample_embedding(
    params: &PriorParams,
    text: &TextEmbedding,
    color: Option<&ColorToken>,
    config: &SampleConfig,
    seed: u64,
) -> Result<ImageEmbedding> {
    config.validate()?;
    let schedule = schedule_for(params)?;
    let mut rng = rng_from_seed(seed);
    let mut z = gaussian_vector(&mut rng, params.config.width);
    let grid = ddim_timesteps(schedule.timesteps, config.steps)?;
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let z0_hat = cfg_denoise(params, text, color, t, &z, config.guidance_scale)?;
        z = ddim_step(&schedule, &z, &z0_hat, t, t_prev)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite trajectory at t={t}")));
        }
    }
    let out = if config.renormalize_output { normalize(&z) } else { z };
    Ok(ImageEmbedding::from_array(&out))
}

/// Draws k candidates on derived seeds and keeps the one closest to the
/// prompt embedding (ties go to the lowest sample index).
pub fn best_of_k(
    params: &PriorParams,
    text: &TextEmbedding,
    color: Option<&ColorToken>,
    config: &SampleConfig,
) -> Result<(ImageEmbedding, f32)> {
    config.validate()?;
    let pooled = text.pooled_array();
    let mut best: Option<(ImageEmbedding, f32)> = None;
    for i in 0..config.k {
        let seed = derive_seed(config.seed, i as u64);
        let emb = sample_embedding(params, text, color, config, seed)?;
        let score = cosine(&pooled, &emb.as_array());
        let better = match &best {
            None => true,
            Some((_, s)) => score > *s,
        };
        if better {
            best = Some((emb, score));
        }
    }
    Ok(best.expect("k >= 1"))
}

/// One prior plus its conditioning inside a composition.
pub struct ComposeEntry<'a> {
    pub params: &'a PriorParams,
    pub text: &'a TextEmbedding,
    pub color: Option<&'a ColorToken>,
}

/// Shared-trajectory composition: per-step x0 predictions from every prior
/// are averaged with the given weights before the common DDIM update.
pub fn compose_sample(
    entries: &[ComposeEntry<'_>],
    weights: &[f32],
    config: &SampleConfig,
    seed: u64,
) -> Result<ImageEmbedding> {
    config.validate()?;
    if entries.is_empty() || entries.len() != weights.len() {
        return Err(Error::invalid("need one weight per prior"));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("weights must be nonnegative"));
    }
    let total: f32 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("weights must sum to 1, got {total}")));
    }
    let first = &entries[0].params.config;
    for e in entries.iter().skip(1) {
        let c = &e.params.config;
        if c.width != first.width || c.timesteps != first.timesteps || c.schedule_kind != first.schedule_kind
        {
            return Err(Error::invalid("composed priors must share width and schedule"));
        }
    }
    let schedule = schedule_for(entries[0].params)?;
    let mut rng = rng_from_seed(seed);
    let mut z = gaussian_vector(&mut rng, first.width);
    let grid = ddim_timesteps(schedule.timesteps, config.steps)?;
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        // zero-weight priors are skipped entirely so that weights like (1, 0)
        // reproduce the single-prior trajectory bit for bit
        let mut z0_hat: Option<Array1<f32>> = None;
        for (entry, &w) in entries.iter().zip(weights.iter()) {
            if w == 0.0 {
                continue;
            }
            let pred = cfg_denoise(entry.params, entry.text, entry.color, t, &z, config.guidance_scale)?;
            z0_hat = Some(match z0_hat {
                None => pred * w,
                Some(acc) => acc + pred * w,
            });
        }
        let z0_hat = z0_hat.expect("weights sum to 1, so at least one is positive");
        z = ddim_step(&schedule, &z, &z0_hat, t, t_prev)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite composed trajectory at t={t}")));
        }
    }
    let out = if config.renormalize_output { normalize(&z) } else { z };
    Ok(ImageEmbedding::from_array(&out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateReport {
    pub score: f32,
    pub seed: u64,
    pub decoded_concept: usize,
    pub decoded_domain: String,
    pub config: SampleConfig,
}

/// End-to-end prompt (and optional color exemplar) to rendered patch.
pub fn generate(
    prompt_tokens: &[usize],
    color_patch: Option<&RasterPatch>,
    params: &PriorParams,
    space: &EmbeddingSpace,
    vocab: &Vocabulary,
    config: &SampleConfig,
) -> Result<(RasterPatch, ImageEmbedding, GenerateReport)> {
    if color_patch.is_some() && !params.config.color_conditioned {
        return Err(Error::invalid("color exemplar requires a color-conditioned model"));
    }
    let text = encode_text(space, vocab, prompt_tokens)?;
    let color_token = match color_patch {
        Some(patch) => {
            let hist = colorlab::lab_histogram(patch, colorlab::TOY_BINS)?;
            Some(colorlab::make_color_token(&hist, params.config.width)?)
        }
        None => None,
    };
    let (emb, score) = best_of_k(params, &text, color_token.as_ref(), config)?;
    let decoded = decode_embedding(space, &emb)?;
    let patch = render_decoded(vocab, space, &decoded, derive_seed(config.seed, 0x9e9e))?;
    let report = GenerateReport {
        score,
        seed: config.seed,
        decoded_concept: decoded.concept_id,
        decoded_domain: decoded.domain.as_str().to_string(),
        config: *config,
    };
    Ok((patch, emb, report))
}
