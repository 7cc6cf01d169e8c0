//! Evaluation suite: linear domain probes, prompt-relevance scoring, Fréchet
//! distance on embedding statistics, color-histogram metrics, and the classic
//! color-transfer baselines (RGB whitening/coloring and mean/std matching).

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorlab::{self};
use crate::error::{Error, Result};
use crate::linalg::{psd_inv_sqrt, psd_sqrt, symmetric_eigen};
use crate::prior::PriorParams;
use crate::sample::{best_of_k, SampleConfig};
use crate::synthspace::{
    decode_embedding, encode_image, render_decoded, DatasetRecord, EmbeddingSpace, ImageEmbedding,
    RasterPatch, TextEmbedding, Vocabulary,
};
use crate::util::{cosine, derive_seed, l2_norm, rng_from_seed};

pub const COV_EIG_FLOOR: f64 = 1e-8;

// ---------------------------------------------------------------------------
// linear probe

/// Multinomial logistic classifier over embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearProbe {
    /// classes x d.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub classes: Vec<String>,
}

impl LinearProbe {
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("probe has no class {name:?}")))
    }

    /// Softmax probabilities for one embedding.
    pub fn predict_proba(&self, emb: &ImageEmbedding) -> Result<Vec<f64>> {
        if emb.vec.len() != self.weight.ncols() {
            return Err(Error::invalid("embedding width does not match probe"));
        }
        let x: Array1<f64> = emb.vec.iter().map(|v| *v as f64).collect();
        let logits = self.weight.dot(&x) + &self.bias;
        Ok(softmax(logits.as_slice().unwrap()))
    }

    pub fn predict(&self, emb: &ImageEmbedding) -> Result<usize> {
        let p = self.predict_proba(emb)?;
        Ok(argmax(&p))
    }

    pub fn accuracy(&self, embeddings: &[ImageEmbedding], labels: &[usize]) -> Result<f64> {
        if embeddings.is_empty() || embeddings.len() != labels.len() {
            return Err(Error::invalid("need one label per embedding"));
        }
        let mut hits = 0usize;
        for (e, l) in embeddings.iter().zip(labels.iter()) {
            if self.predict(e)? == *l {
                hits += 1;
            }
        }
        Ok(hits as f64 / embeddings.len() as f64)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-batch gradient descent on the multinomial cross-entropy with L2
/// penalty, run to a 1e-6 tolerance on the loss delta. The step size adapts:
/// halve on an uphill step, grow gently otherwise.
pub fn train_probe(
    embeddings: &[ImageEmbedding],
    labels: &[usize],
    class_names: &[String],
    l2_reg: f64,
) -> Result<LinearProbe> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::invalid("need one label per embedding"));
    }
    let k = class_names.len();
    if labels.iter().any(|l| *l >= k) {
        return Err(Error::invalid("label index outside class list"));
    }
    let mut present = vec![false; k];
    for l in labels {
        present[*l] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::invalid("probe training needs at least two classes present"));
    }
    let d = embeddings[0].vec.len();
    let n = embeddings.len();
    let xs: Vec<Array1<f64>> = embeddings
        .iter()
        .map(|e| {
            if e.vec.len() != d {
                return Err(Error::invalid("embeddings have mixed widths"));
            }
            Ok(e.vec.iter().map(|v| *v as f64).collect())
        })
        .collect::<Result<_>>()?;

    let loss_and_grad = |w: &Array2<f64>, b: &Array1<f64>| {
        let mut loss = 0.0f64;
        let mut gw = Array2::<f64>::zeros((k, d));
        let mut gb = Array1::<f64>::zeros(k);
        for (x, &y) in xs.iter().zip(labels.iter()) {
            let logits = w.dot(x) + b;
            let p = softmax(logits.as_slice().unwrap());
            loss -= p[y].max(1e-300).ln();
            for c in 0..k {
                let err = p[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for j in 0..d {
                    gw[[c, j]] += err * x[j];
                }
            }
        }
        loss /= n as f64;
        gw.mapv_inplace(|v| v / n as f64);
        gb.mapv_inplace(|v| v / n as f64);
        loss += 0.5 * l2_reg * w.iter().map(|v| v * v).sum::<f64>();
        gw = gw + w * l2_reg;
        (loss, gw, gb)
    };

    let mut w = Array2::<f64>::zeros((k, d));
    let mut b = Array1::<f64>::zeros(k);
    let (mut loss, mut gw, mut gb) = loss_and_grad(&w, &b);
    let mut lr = 2.0f64;
    for _ in 0..20_000 {
        let w_new = &w - &(&gw * lr);
        let b_new = &b - &(&gb * lr);
        let (loss_new, gw_new, gb_new) = loss_and_grad(&w_new, &b_new);
        if !loss_new.is_finite() || loss_new > loss {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
            continue;
        }
        let delta = loss - loss_new;
        w = w_new;
        b = b_new;
        gw = gw_new;
        gb = gb_new;
        loss = loss_new;
        lr = (lr * 1.05).min(50.0);
        if delta < 1e-6 {
            break;
        }
    }
    Ok(LinearProbe { weight: w, bias: b, classes: class_names.to_vec() })
}

/// Mean softmax probability of `positive_class` over a set of embeddings.
pub fn domain_confidence(
    probe: &LinearProbe,
    embeddings: &[ImageEmbedding],
    positive_class: &str,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::invalid("cannot average confidence over an empty set"));
    }
    let idx = probe.class_index(positive_class)?;
    let mut acc = 0.0;
    for e in embeddings {
        acc += probe.predict_proba(e)?[idx];
    }
    Ok(acc / embeddings.len() as f64)
}

/// Cosine between the pooled text vector and the image embedding.
pub fn relevance_score(text: &TextEmbedding, image: &ImageEmbedding) -> Result<f64> {
    let t = text.pooled_array();
    let v = image.as_array();
    if l2_norm(&t) == 0.0 || l2_norm(&v) == 0.0 {
        return Err(Error::invalid("relevance score is undefined for zero vectors"));
    }
    Ok(cosine(&t, &v) as f64)
}

// ---------------------------------------------------------------------------
// Fréchet distance

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    /// d x d symmetric, unbiased estimator.
    pub cov: Array2<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn fit(embeddings: &[ImageEmbedding]) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::invalid("need at least two samples for covariance"));
        }
        let d = embeddings[0].vec.len();
        let n = embeddings.len();
        let mut mean = Array1::<f64>::zeros(d);
        for e in embeddings {
            if e.vec.len() != d {
                return Err(Error::invalid("embeddings have mixed widths"));
            }
            for (m, v) in mean.iter_mut().zip(e.vec.iter()) {
                *m += *v as f64;
            }
        }
        mean.mapv_inplace(|v| v / n as f64);
        let mut cov = Array2::<f64>::zeros((d, d));
        for e in embeddings {
            let x: Array1<f64> = e.vec.iter().map(|v| *v as f64).collect();
            let c = &x - &mean;
            for i in 0..d {
                for j in i..d {
                    cov[[i, j]] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[[i, j]] / (n - 1) as f64;
                cov[[i, j]] = v;
                cov[[j, i]] = v;
            }
        }
        Ok(GaussianStats { mean, cov, count: n })
    }
}

/// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the cross term
/// computed as tr sqrt(sqrt(Sa) Sb sqrt(Sa)) so the eigendecomposition runs
/// on a symmetric matrix; negative eigenvalues are clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.nrows() != d || b.cov.nrows() != d {
        return Err(Error::invalid("Gaussian stats dimensions differ"));
    }
    let diff = &a.mean - &b.mean;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();
    let sqrt_a = psd_sqrt(&a.cov)?;
    let inner = sqrt_a.dot(&b.cov).dot(&sqrt_a);
    let sym = (&inner + &inner.t()) * 0.5;
    let (w, _) = symmetric_eigen(&sym)?;
    let cross: f64 = w.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[[i, i]]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * cross).max(0.0))
}

// ---------------------------------------------------------------------------
// color-transfer baselines

fn pixel_moments(patch: &RasterPatch) -> (Array1<f64>, Array2<f64>) {
    let n = patch.pixel_count() as f64;
    let mut mean = Array1::<f64>::zeros(3);
    for (r, g, b) in patch.pixels_iter() {
        mean[0] += r as f64;
        mean[1] += g as f64;
        mean[2] += b as f64;
    }
    mean.mapv_inplace(|v| v / n);
    let mut cov = Array2::<f64>::zeros((3, 3));
    for (r, g, b) in patch.pixels_iter() {
        let c = [r as f64 - mean[0], g as f64 - mean[1], b as f64 - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov.mapv_inplace(|v| v / (n - 1.0).max(1.0));
    (mean, cov)
}

/// Whitening/coloring transform on RGB pixel clouds: whiten the source by its
/// inverse covariance square root, color by the reference square root, and
/// re-center on the reference mean.
pub fn wct_rgb_transfer(src: &RasterPatch, reference: &RasterPatch) -> Result<RasterPatch> {
    let (mu_s, cov_s) = pixel_moments(src);
    let (mu_r, cov_r) = pixel_moments(reference);
    let whiten = psd_inv_sqrt(&cov_s, COV_EIG_FLOOR)?;
    let color = psd_sqrt(&cov_r)?;
    let transform = color.dot(&whiten);
    let mut out = src.clone();
    for y in 0..src.height {
        for x in 0..src.width {
            let p = src.get(x, y);
            let c = Array1::from(vec![
                p[0] as f64 - mu_s[0],
                p[1] as f64 - mu_s[1],
                p[2] as f64 - mu_s[2],
            ]);
            let t = transform.dot(&c) + &mu_r;
            out.set(x, y, [t[0] as f32, t[1] as f32, t[2] as f32]);
        }
    }
    Ok(out)
}

/// Per-channel mean/std matching (Reinhard-style, in RGB).
pub fn meanstd_transfer(src: &RasterPatch, reference: &RasterPatch) -> Result<RasterPatch> {
    let stats = |p: &RasterPatch| {
        let n = p.pixel_count() as f64;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        for (r, g, b) in p.pixels_iter() {
            mean[0] += r as f64;
            mean[1] += g as f64;
            mean[2] += b as f64;
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for (r, g, b) in p.pixels_iter() {
            var[0] += (r as f64 - mean[0]).powi(2);
            var[1] += (g as f64 - mean[1]).powi(2);
            var[2] += (b as f64 - mean[2]).powi(2);
        }
        let std = var.map(|v| (v / n).sqrt());
        (mean, std)
    };
    let (mu_s, sd_s) = stats(src);
    let (mu_r, sd_r) = stats(reference);
    let mut out = src.clone();
    for y in 0..src.height {
        for x in 0..src.width {
            let p = src.get(x, y);
            let mut q = [0.0f32; 3];
            for c in 0..3 {
                let scaled = (p[c] as f64 - mu_s[c]) * (sd_r[c] / sd_s[c].max(1e-8)) + mu_r[c];
                q[c] = scaled as f32;
            }
            out.set(x, y, q);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// report assembly

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_COLUMNS: [&str; 5] = ["Clf.Score", "CLIP", "FID", "H dist.", "KL div."];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    #[serde(rename = "Clf.Score")]
    pub clf_score: Option<f64>,
    #[serde(rename = "CLIP")]
    pub clip: Option<f64>,
    #[serde(rename = "FID")]
    pub fid: Option<f64>,
    #[serde(rename = "H dist.")]
    pub h_dist: Option<f64>,
    #[serde(rename = "KL div.")]
    pub kl_div: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub n_prompts: usize,
    pub sample: SampleConfig,
    pub positive_class: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_prompts: usize,
    pub sample: SampleConfig,
    /// Probe class scored in the Clf.Score column (usually the trained domain).
    pub positive_class: Option<String>,
    /// Add no-color generation plus WCT-RGB / mean-std transfer baselines
    /// (color models only).
    pub with_baselines: bool,
}

/// One generated output paired with the record it answers.
pub struct GeneratedItem {
    pub emb: ImageEmbedding,
    pub patch: RasterPatch,
}

fn row_from_items(
    method: &str,
    items: &[GeneratedItem],
    records: &[&DatasetRecord],
    probe: Option<&LinearProbe>,
    positive_class: Option<&str>,
    real_stats: Option<&GaussianStats>,
    with_color_metrics: bool,
) -> Result<MetricRow> {
    let embs: Vec<ImageEmbedding> = items.iter().map(|i| i.emb.clone()).collect();
    let clf_score = match (probe, positive_class) {
        (Some(p), Some(c)) => Some(domain_confidence(p, &embs, c)?),
        _ => None,
    };
    let mut clip_acc = 0.0;
    for (item, rec) in items.iter().zip(records.iter()) {
        clip_acc += relevance_score(&rec.text_emb, &item.emb)?;
    }
    let clip = Some(clip_acc / items.len() as f64);
    let fid = match real_stats {
        Some(real) => Some(frechet_distance(&GaussianStats::fit(&embs)?, real)?),
        None => None,
    };
    let (h_dist, kl_div) = if with_color_metrics {
        let mut h_acc = 0.0;
        let mut kl_acc = 0.0;
        for (item, rec) in items.iter().zip(records.iter()) {
            let hist = colorlab::lab_histogram(&item.patch, rec.lab_hist.bins)?;
            h_acc += colorlab::hellinger(&hist, &rec.lab_hist)?;
            kl_acc += colorlab::kl_divergence(&hist, &rec.lab_hist)?;
        }
        let n = items.len() as f64;
        (Some(h_acc / n), Some(kl_acc / n))
    } else {
        (None, None)
    };
    Ok(MetricRow { method: method.to_string(), clf_score, clip, fid, h_dist, kl_div })
}

fn generate_items(
    params: &PriorParams,
    space: &EmbeddingSpace,
    vocab: &Vocabulary,
    records: &[&DatasetRecord],
    sample_cfg: &SampleConfig,
    use_color: bool,
    seed_salt: u64,
) -> Result<Vec<GeneratedItem>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let color_token = if use_color && params.config.color_conditioned {
                Some(colorlab::make_color_token(&rec.lab_hist, params.config.width)?)
            } else {
                None
            };
            let cfg = SampleConfig {
                seed: derive_seed(sample_cfg.seed, seed_salt.wrapping_add(i as u64)),
                ..*sample_cfg
            };
            let (emb, _) = best_of_k(params, &rec.text_emb, color_token.as_ref(), &cfg)?;
            let decoded = decode_embedding(space, &emb)?;
            let patch = render_decoded(vocab, space, &decoded, derive_seed(cfg.seed, 0xa11))?;
            Ok(GeneratedItem { emb, patch })
        })
        .collect()
}

/// Builds a metrics table from precomputed outputs; `eval_report` is the
/// sampling front end. Exposed so oracle outputs can be scored directly.
pub fn report_from_items(
    labeled_rows: Vec<(String, Vec<GeneratedItem>)>,
    records: &[&DatasetRecord],
    probe: Option<&LinearProbe>,
    positive_class: Option<&str>,
    real_stats: Option<&GaussianStats>,
    with_color_metrics: bool,
    sample_cfg: &SampleConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut rows = Vec::new();
    for (method, items) in &labeled_rows {
        if items.len() != records.len() {
            return Err(Error::invalid("row items must align with eval records"));
        }
        rows.push(row_from_items(
            method,
            items,
            records,
            probe,
            positive_class,
            real_stats,
            with_color_metrics,
        )?);
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        columns: REPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
        n_prompts: records.len(),
        sample: *sample_cfg,
        positive_class: positive_class.map(|c| c.to_string()),
    })
}

/// Samples the prior over held-out prompts and assembles the metrics table;
/// color models also report Hellinger/KL against the exemplar histograms,
/// with KL taken as KL(generated || exemplar).
pub fn eval_report(
    params: &PriorParams,
    space: &EmbeddingSpace,
    vocab: &Vocabulary,
    probe: Option<&LinearProbe>,
    eval_set: &[DatasetRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if eval_set.is_empty() || cfg.n_prompts == 0 {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let records: Vec<&DatasetRecord> = eval_set.iter().take(cfg.n_prompts).collect();
    let real_embs: Vec<ImageEmbedding> = records.iter().map(|r| r.image_emb.clone()).collect();
    let real_stats = if records.len() >= 2 { Some(GaussianStats::fit(&real_embs)?) } else { None };
    let color = params.config.color_conditioned;

    let mut labeled_rows = Vec::new();
    let main = generate_items(params, space, vocab, &records, &cfg.sample, color, 0)?;
    labeled_rows.push(("prior".to_string(), main));
    if cfg.with_baselines && color {
        let no_color = generate_items(params, space, vocab, &records, &cfg.sample, false, 1)?;
        let wct: Vec<GeneratedItem> = no_color
            .iter()
            .zip(records.iter())
            .enumerate()
            .map(|(i, (item, rec))| {
                let decoded = decode_embedding(space, &item.emb)?;
                let patch = wct_rgb_transfer(&item.patch, &rec.patch)?;
                let emb = reencode_patch(
                    space, &patch, decoded.concept_id, decoded.domain, i as u64, &cfg.sample,
                )?;
                Ok(GeneratedItem { emb, patch })
            })
            .collect::<Result<_>>()?;
        let meanstd: Vec<GeneratedItem> = no_color
            .iter()
            .zip(records.iter())
            .enumerate()
            .map(|(i, (item, rec))| {
                let decoded = decode_embedding(space, &item.emb)?;
                let patch = meanstd_transfer(&item.patch, &rec.patch)?;
                let emb = reencode_patch(
                    space, &patch, decoded.concept_id, decoded.domain, i as u64, &cfg.sample,
                )?;
                Ok(GeneratedItem { emb, patch })
            })
            .collect::<Result<_>>()?;
        labeled_rows.push(("prior_no_color".to_string(), no_color));
        labeled_rows.push(("wct_rgb".to_string(), wct));
        labeled_rows.push(("meanstd".to_string(), meanstd));
    }
    report_from_items(
        labeled_rows,
        &records,
        probe,
        cfg.positive_class.as_deref(),
        real_stats.as_ref(),
        color,
        &cfg.sample,
    )
}

/// Re-embeds a transferred patch so the baseline's FID and Clf.Score reflect
/// the altered pixel statistics. Concept and domain are taken from the
/// decoded attributes of the untransferred render.
fn reencode_patch(
    space: &EmbeddingSpace,
    patch: &RasterPatch,
    concept_id: usize,
    domain: crate::synthspace::DomainLabel,
    index: u64,
    sample_cfg: &SampleConfig,
) -> Result<ImageEmbedding> {
    let mut rng = rng_from_seed(derive_seed(sample_cfg.seed, 0xbead ^ index));
    encode_image(space, patch, concept_id, domain, &mut rng)
}
