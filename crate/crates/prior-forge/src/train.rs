//! Training: conditioning-dropout plan, AdamW over the flattened parameter
//! list, deterministic batched MSE training of a prior, and probe-based
//! dataset filtering.

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorlab;
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evalx::LinearProbe;
use crate::prior::{
    build_sequence, denoise_backward, denoise_with_cache, PriorConfig, PriorParams,
};
use crate::sample::schedule_for;
use crate::synthspace::{DatasetRecord, DomainLabel};
use crate::util::{derive_seed, gaussian_vector, rng_from_seed};

/// Probability of dropping both text and color (full unconditional pass).
pub const P_DROP_BOTH: f64 = 0.1;
/// Probability of dropping the color token alone, given text is kept.
pub const P_DROP_COLOR_ONLY: f64 = 0.5;

/// Which conditioning inputs are replaced by learned nulls for one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutPlan {
    pub drop_text: bool,
    pub drop_color: bool,
}

impl DropoutPlan {
    pub fn keep_all() -> Self {
        DropoutPlan { drop_text: false, drop_color: false }
    }
}

/// Nested dropout draw: first decide the drop-both event at 0.1, then (for
/// color models) drop color alone at 0.5, yielding a 0.10 / 0.45 / 0.45
/// split over both-dropped / color-dropped / all-kept. Text is never dropped
/// while color is kept.
pub fn dropout_mask<R: Rng>(rng: &mut R, color_conditioned: bool) -> DropoutPlan {
    if rng.gen::<f64>() < P_DROP_BOTH {
        return DropoutPlan { drop_text: true, drop_color: true };
    }
    if color_conditioned && rng.gen::<f64>() < P_DROP_COLOR_ONLY {
        return DropoutPlan { drop_text: false, drop_color: true };
    }
    DropoutPlan::keep_all()
}

// ---------------------------------------------------------------------------
// optimizer

/// Adaptive moment estimation with decoupled weight decay and linear warmup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub warmup: usize,
    pub step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &PriorParams, lr: f32, weight_decay: f32, warmup: usize) -> Self {
        let mut probe = params.clone();
        let shapes: Vec<usize> = probe.param_slices_mut().iter().map(|s| s.len()).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup,
            step: 0,
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    fn current_lr(&self) -> f32 {
        if self.warmup > 0 && self.step <= self.warmup {
            self.lr * self.step as f32 / self.warmup as f32
        } else {
            self.lr
        }
    }

    /// One update; `grads` mirrors the parameter layout.
    pub fn apply(&mut self, params: &mut PriorParams, grads: &mut PriorParams) {
        self.step += 1;
        let lr = self.current_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let p_slices = params.param_slices_mut();
        let g_slices = grads.param_slices_mut();
        for (((p, g), m), v) in p_slices
            .into_iter()
            .zip(g_slices.into_iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup: usize,
    pub seed: u64,
    /// Restrict training to one ground-truth domain when set.
    pub domain_filter: Option<DomainLabel>,
    /// Disable to train a fully conditional model (no guidance nulls learned).
    pub dropout: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            warmup: 100,
            seed: 0,
            domain_filter: None,
            dropout: true,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub prior_config: PriorConfig,
    /// (step, batch loss) every `log_every` steps plus the final step.
    pub loss_curve: Vec<(usize, f32)>,
    pub final_loss: f32,
    pub n_records: usize,
    pub dataset_fingerprint: u64,
    pub wall_clock_secs: f64,
}

/// Order-independent-after-sorting digest of a record set; stored in
/// manifests and model files so artifacts can verify their provenance.
pub fn dataset_fingerprint(records: &[&DatasetRecord]) -> u64 {
    let mut fp = 0xcbf2_9ce4_8422_2325u64;
    for r in records {
        fp = derive_seed(fp ^ r.id as u64, r.domain.index() as u64);
        fp = derive_seed(fp, r.concept_id as u64);
    }
    derive_seed(fp, records.len() as u64)
}

/// One batched MSE step: per record sample t uniform in 1..=T, diffuse the
/// image embedding forward, apply the dropout plan, and regress the denoised
/// prediction onto the clean embedding. Per-record gradients are computed in
/// parallel and reduced in index order so the update is bit-deterministic.
pub fn training_step(
    params: &mut PriorParams,
    opt: &mut AdamW,
    batch: &[&DatasetRecord],
    schedule: &NoiseSchedule,
    dropout: bool,
    step_seed: u64,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let color = params.config.color_conditioned;
    let width = params.config.width;
    let shared: &PriorParams = params;
    let per_record: Vec<Result<(f64, PriorParams)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = rng_from_seed(derive_seed(step_seed, i as u64));
            let t = rng.gen_range(1..=schedule.timesteps);
            let z0 = rec.image_emb.as_array();
            let eps = gaussian_vector(&mut rng, width);
            let z_t = forward_diffuse(schedule, &z0, t, &eps)?;
            let plan =
                if dropout { dropout_mask(&mut rng, color) } else { DropoutPlan::keep_all() };
            let color_token = if color {
                Some(colorlab::make_color_token(&rec.lab_hist, width)?)
            } else {
                None
            };
            let seq = build_sequence(
                shared,
                &rec.text_emb,
                color_token.as_ref(),
                t,
                &z_t,
                plan.drop_text,
                plan.drop_color,
            )?;
            let (pred, cache) = denoise_with_cache(shared, &seq)?;
            let loss: f64 =
                pred.iter().zip(z0.iter()).map(|(p, z)| ((p - z) as f64).powi(2)).sum();
            let d_out: Array1<f32> = pred
                .iter()
                .zip(z0.iter())
                .map(|(p, z)| 2.0 * (p - z) / batch.len() as f32)
                .collect();
            let mut grads = shared.zeros_like();
            denoise_backward(shared, &seq, &cache, &d_out, &mut grads);
            Ok((loss, grads))
        })
        .collect();

    let mut total_loss = 0.0f64;
    let mut grads = params.zeros_like();
    for item in per_record {
        let (loss, mut g) = item?;
        total_loss += loss;
        grads.accumulate(&mut g, 1.0);
    }
    let loss = (total_loss / batch.len() as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite training loss at optimizer step {}",
            opt.step + 1
        )));
    }
    opt.apply(params, &mut grads);
    Ok(loss)
}

/// Trains a prior on the (optionally domain-filtered) dataset. Records are
/// canonicalized by id before batch selection, so training is invariant to
/// the order the dataset is supplied in.
pub fn train_prior(
    dataset: &[DatasetRecord],
    prior_config: PriorConfig,
    tc: &TrainConfig,
) -> Result<(PriorParams, TrainReport)> {
    if tc.steps == 0 || tc.batch_size == 0 {
        return Err(Error::invalid("steps and batch_size must be positive"));
    }
    let mut records: Vec<&DatasetRecord> = dataset
        .iter()
        .filter(|r| tc.domain_filter.map_or(true, |d| r.domain == d))
        .collect();
    if records.is_empty() {
        return Err(Error::invalid("no records left after domain filtering"));
    }
    records.sort_by_key(|r| r.id);
    let start = std::time::Instant::now();
    let mut params = PriorParams::init(prior_config, derive_seed(tc.seed, 0x1417))?;
    let schedule = schedule_for(&params)?;
    let mut opt = AdamW::new(&params, tc.lr, tc.weight_decay, tc.warmup);
    let mut loss_curve = Vec::new();
    let mut last_loss = f32::NAN;
    for step in 0..tc.steps {
        let step_seed = derive_seed(tc.seed, step as u64);
        let mut batch_rng = rng_from_seed(derive_seed(step_seed, u64::MAX));
        let batch: Vec<&DatasetRecord> = (0..tc.batch_size.min(records.len()))
            .map(|_| records[batch_rng.gen_range(0..records.len())])
            .collect();
        last_loss = training_step(&mut params, &mut opt, &batch, &schedule, tc.dropout, step_seed)?;
        if step % tc.log_every.max(1) == 0 || step + 1 == tc.steps {
            loss_curve.push((step, last_loss));
        }
    }
    let report = TrainReport {
        config: tc.clone(),
        prior_config,
        loss_curve,
        final_loss: last_loss,
        n_records: records.len(),
        dataset_fingerprint: dataset_fingerprint(&records),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// Keeps records whose probe probability for `positive_class` is at least
/// `threshold`; mirrors classifier-filtered dataset construction.
pub fn filter_dataset_by_probe(
    records: &[DatasetRecord],
    probe: &LinearProbe,
    positive_class: &str,
    threshold: f64,
) -> Result<Vec<DatasetRecord>> {
    let idx = probe.class_index(positive_class)?;
    let mut out = Vec::new();
    for r in records {
        if probe.predict_proba(&r.image_emb)?[idx] >= threshold {
            out.push(r.clone());
        }
    }
    Ok(out)
}
