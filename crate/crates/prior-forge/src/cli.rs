//! Command-line surface: dataset generation, prior training, sampling,
//! composition and evaluation, each emitting artifacts that embed the full
//! run configuration for reproducibility.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::artifacts::{load_dataset, load_model, save_dataset, save_model};
use crate::colorlab;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalx::{self, train_probe, EvalConfig, LinearProbe};
use crate::sample::{compose_sample, generate, sample_embedding, ComposeEntry, SampleConfig};
use crate::synthspace::{
    decode_embedding, encode_text, gen_dataset, render_decoded, DatasetRecord, DomainLabel,
    EmbeddingSpace, ImageEmbedding, RasterPatch, Vocabulary,
};
use crate::tensorio::{write_bytes_atomic, write_json, write_tensor, TensorFile};
use crate::train::train_prior;
use crate::util::{cosine, derive_seed};

pub const GUIDANCE_SWEEP: [f32; 4] = [1.0, 2.0, 3.0, 5.0];

#[derive(Parser, Debug)]
#[command(
    name = "prior-forge",
    version,
    about = "Desk-scale diffusion priors over a synthetic embedding space"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated domain subset (e.g. "texture,vector"); default all.
        #[arg(long)]
        domains: Option<String>,
    },
    /// Train a diffusion prior on a dataset directory.
    TrainPrior {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// texture | vector | isolated | photo | all
        #[arg(long)]
        domain: Option<String>,
        /// Condition on the exemplar color-histogram token.
        #[arg(long)]
        color_cond: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a prompt (optionally with a color exemplar) into a patch.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Whitespace-separated vocabulary words, e.g. "berry red".
        #[arg(long)]
        prompt: String,
        /// PPM (P6) color exemplar; requires a color-conditioned model.
        #[arg(long)]
        color_image: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compose two or more priors along a shared trajectory.
    Compose {
        /// Model directories, repeated or comma-separated.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        models: Vec<PathBuf>,
        /// Comma-separated weights summing to 1, e.g. "0.5,0.5".
        #[arg(long)]
        weights: String,
        /// One prompt per model, or a single prompt shared by all.
        #[arg(long, num_args = 1..)]
        prompt: Vec<String>,
        #[arg(long)]
        color_image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a model over held-out prompts (Tables-style report).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_prompts: Option<usize>,
        #[arg(long)]
        positive_class: Option<String>,
        /// Skip the no-color / WCT / mean-std baseline rows.
        #[arg(long)]
        no_baselines: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Caps rayon's worker count from PRIOR_FORGE_THREADS (0 or unset = auto).
pub fn configure_threads() {
    if let Ok(v) = std::env::var("PRIOR_FORGE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, config, n, seed, domains } => {
            cmd_gen_data(&out, config.as_deref(), n, seed, domains.as_deref())
        }
        Command::TrainPrior { dataset, out, config, domain, color_cond, steps, seed } => {
            cmd_train_prior(&dataset, &out, config.as_deref(), domain.as_deref(), color_cond, steps, seed)
        }
        Command::Sample { model, out, prompt, color_image, k, steps, guidance, seed } => {
            cmd_sample(&model, &out, &prompt, color_image.as_deref(), k, steps, guidance, seed)
        }
        Command::Compose { models, weights, prompt, color_image, out, steps, guidance, seed } => {
            cmd_compose(&models, &weights, &prompt, color_image.as_deref(), &out, steps, guidance, seed)
        }
        Command::Eval { model, dataset, out, n_prompts, positive_class, no_baselines, seed } => {
            cmd_eval(&model, &dataset, &out, n_prompts, positive_class.as_deref(), no_baselines, seed)
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn parse_domains(list: &str) -> Result<Vec<DomainLabel>> {
    list.split(',')
        .map(|s| DomainLabel::from_str(s.trim()))
        .collect()
}

fn parse_prompt(vocab: &Vocabulary, prompt: &str) -> Result<Vec<usize>> {
    let tokens: Result<Vec<usize>> =
        prompt.split_whitespace().map(|w| vocab.token_id(w)).collect();
    let tokens = tokens?;
    if tokens.is_empty() {
        return Err(Error::invalid("prompt is empty"));
    }
    Ok(tokens)
}

fn cmd_gen_data(
    out: &Path,
    config: Option<&Path>,
    n: Option<usize>,
    seed: Option<u64>,
    domains: Option<&str>,
) -> Result<()> {
    let mut rc = load_run_config(config)?;
    if let Some(n) = n {
        rc.dataset.n = n;
    }
    if let Some(seed) = seed {
        rc.dataset.seed = seed;
    }
    if let Some(list) = domains {
        rc.dataset = rc.dataset.clone().with_domains(&parse_domains(list)?);
    }
    let vocab = Vocabulary::default();
    let space = EmbeddingSpace::new(rc.space, &vocab)?;
    let (records, info) =
        gen_dataset(&space, &vocab, rc.dataset.n, rc.dataset.domain_mix, rc.dataset.seed)?;
    save_dataset(out, &rc, &records, &info)?;
    println!(
        "wrote dataset: {} records, domain counts {:?} -> {}",
        info.n,
        info.domain_counts,
        out.display()
    );
    Ok(())
}

fn cmd_train_prior(
    dataset: &Path,
    out: &Path,
    config: Option<&Path>,
    domain: Option<&str>,
    color_cond: bool,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let (manifest, _space, _vocab, records) = load_dataset(dataset)?;
    let mut rc = match config {
        Some(p) => {
            let mut rc = load_run_config(Some(p))?;
            // the dataset's space/generation sections are authoritative
            rc.space = manifest.run_config.space;
            rc.dataset = manifest.run_config.dataset.clone();
            rc
        }
        None => manifest.run_config.clone(),
    };
    if let Some(d) = domain {
        rc.train.domain_filter = if d == "all" { None } else { Some(DomainLabel::from_str(d)?) };
    }
    if color_cond {
        rc.model.color_conditioned = true;
    }
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    let (params, report) = train_prior(&records, rc.model, &rc.train)?;
    save_model(out, &rc, &params, &report)?;
    println!(
        "trained prior: {} steps on {} records, final loss {:.6} -> {}",
        rc.train.steps,
        report.n_records,
        report.final_loss,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SweepPoint {
    guidance_scale: f32,
    relevance: f32,
}

#[derive(Debug, Clone, Serialize)]
struct SampleReport {
    run_config: RunConfig,
    prompt: String,
    color_image: Option<String>,
    score: f32,
    decoded_concept: usize,
    decoded_domain: String,
    guidance_sweep: Vec<SweepPoint>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    model: &Path,
    out: &Path,
    prompt: &str,
    color_image: Option<&Path>,
    k: Option<usize>,
    steps: Option<usize>,
    guidance: Option<f32>,
    seed: Option<u64>,
) -> Result<()> {
    let (manifest, params) = load_model(model)?;
    let mut rc = manifest.run_config.clone();
    if let Some(k) = k {
        rc.sample.k = k;
    }
    if let Some(s) = steps {
        rc.sample.steps = s;
    }
    if let Some(g) = guidance {
        rc.sample.guidance_scale = g;
    }
    if let Some(s) = seed {
        rc.sample.seed = s;
    }
    let vocab = Vocabulary::default();
    let space = EmbeddingSpace::new(rc.space, &vocab)?;
    let tokens = parse_prompt(&vocab, prompt)?;
    let exemplar = match color_image {
        Some(p) => Some(RasterPatch::from_ppm(&std::fs::read(p)?)?),
        None => None,
    };
    let (patch, emb, gen_report) =
        generate(&tokens, exemplar.as_ref(), &params, &space, &vocab, &rc.sample)?;
    // small guidance sweep from the same initial noise, for the report
    let text = encode_text(&space, &vocab, &tokens)?;
    let color_token = match &exemplar {
        Some(p) => Some(colorlab::make_color_token(
            &colorlab::lab_histogram(p, colorlab::TOY_BINS)?,
            params.config.width,
        )?),
        None => None,
    };
    let mut sweep = Vec::new();
    for scale in GUIDANCE_SWEEP {
        let cfg = SampleConfig { guidance_scale: scale, ..rc.sample };
        let e = sample_embedding(&params, &text, color_token.as_ref(), &cfg, derive_seed(cfg.seed, 0))?;
        sweep.push(SweepPoint {
            guidance_scale: scale,
            relevance: cosine(&text.pooled_array(), &e.as_array()),
        });
    }
    write_bytes_atomic(&out.join("sample.ppm"), &patch.to_ppm())?;
    write_tensor(
        &out.join("embedding.prft"),
        &TensorFile::new(vec![emb.vec.len() as u64], emb.vec.clone())?,
    )?;
    let report = SampleReport {
        run_config: rc,
        prompt: prompt.to_string(),
        color_image: color_image
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().to_string()),
        score: gen_report.score,
        decoded_concept: gen_report.decoded_concept,
        decoded_domain: gen_report.decoded_domain.clone(),
        guidance_sweep: sweep,
    };
    write_json(&out.join("report.json"), &report)?;
    println!(
        "sampled '{}': decoded {}/{} score {:.4} -> {}",
        prompt,
        report.decoded_concept,
        report.decoded_domain,
        report.score,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ComposeReport {
    run_config: RunConfig,
    models: Vec<String>,
    weights: Vec<f32>,
    prompts: Vec<String>,
    decoded_concept: usize,
    decoded_domain: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_compose(
    models: &[PathBuf],
    weights: &str,
    prompts: &[String],
    color_image: Option<&Path>,
    out: &Path,
    steps: Option<usize>,
    guidance: Option<f32>,
    seed: Option<u64>,
) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::invalid("compose needs at least two model directories"));
    }
    let weights: Vec<f32> = weights
        .split(',')
        .map(|w| w.trim().parse::<f32>().map_err(|_| Error::invalid(format!("bad weight {w:?}"))))
        .collect::<Result<_>>()?;
    let loaded: Vec<_> = models.iter().map(|m| load_model(m)).collect::<Result<_>>()?;
    let mut rc = loaded[0].0.run_config.clone();
    if let Some(s) = steps {
        rc.sample.steps = s;
    }
    if let Some(g) = guidance {
        rc.sample.guidance_scale = g;
    }
    if let Some(s) = seed {
        rc.sample.seed = s;
    }
    for (m, _) in &loaded {
        let same = serde_json::to_string(&m.run_config.space)?
            == serde_json::to_string(&rc.space)?;
        if !same {
            return Err(Error::invalid("composed models use different embedding spaces"));
        }
    }
    let vocab = Vocabulary::default();
    let space = EmbeddingSpace::new(rc.space, &vocab)?;
    let prompt_list: Vec<&str> = if prompts.len() == 1 {
        vec![prompts[0].as_str(); models.len()]
    } else if prompts.len() == models.len() {
        prompts.iter().map(|p| p.as_str()).collect()
    } else {
        return Err(Error::invalid("give one prompt total or one per model"));
    };
    let texts = prompt_list
        .iter()
        .map(|p| encode_text(&space, &vocab, &parse_prompt(&vocab, p)?))
        .collect::<Result<Vec<_>>>()?;
    let exemplar = match color_image {
        Some(p) => Some(RasterPatch::from_ppm(&std::fs::read(p)?)?),
        None => None,
    };
    let color_token = match &exemplar {
        Some(p) => Some(colorlab::make_color_token(
            &colorlab::lab_histogram(p, colorlab::TOY_BINS)?,
            loaded[0].1.config.width,
        )?),
        None => None,
    };
    let entries: Vec<ComposeEntry<'_>> = loaded
        .iter()
        .zip(texts.iter())
        .map(|((_, params), text)| ComposeEntry {
            params,
            text,
            color: color_token.as_ref().filter(|_| params.config.color_conditioned),
        })
        .collect();
    let emb = compose_sample(&entries, &weights, &rc.sample, rc.sample.seed)?;
    let decoded = decode_embedding(&space, &emb)?;
    let patch = render_decoded(&vocab, &space, &decoded, derive_seed(rc.sample.seed, 0x9e9e))?;
    write_bytes_atomic(&out.join("composed.ppm"), &patch.to_ppm())?;
    write_tensor(
        &out.join("embedding.prft"),
        &TensorFile::new(vec![emb.vec.len() as u64], emb.vec.clone())?,
    )?;
    // record directory names only so reports are byte-stable across
    // differing absolute working locations
    let dir_name = |p: &Path| {
        p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default()
    };
    let report = ComposeReport {
        run_config: rc,
        models: models.iter().map(|m| dir_name(m)).collect(),
        weights,
        prompts: prompt_list.iter().map(|p| p.to_string()).collect(),
        decoded_concept: decoded.concept_id,
        decoded_domain: decoded.domain.as_str().to_string(),
    };
    write_json(&out.join("report.json"), &report)?;
    println!(
        "composed {} priors: decoded {}/{} -> {}",
        models.len(),
        report.decoded_concept,
        report.decoded_domain,
        out.display()
    );
    Ok(())
}

/// Trains the domain probe used by evaluation on the dataset's embeddings.
pub fn domain_probe(records: &[DatasetRecord]) -> Result<LinearProbe> {
    let embs: Vec<ImageEmbedding> = records.iter().map(|r| r.image_emb.clone()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.domain.index()).collect();
    let classes: Vec<String> =
        DomainLabel::ALL.iter().map(|d| d.as_str().to_string()).collect();
    train_probe(&embs, &labels, &classes, 1e-4)
}

#[derive(Debug, Clone, Serialize)]
struct EvalArtifact {
    run_config: RunConfig,
    report: evalx::EvalReport,
}

fn report_csv(report: &evalx::EvalReport) -> String {
    let mut csv = String::from("method,Clf.Score,CLIP,FID,H dist.,KL div.\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method,
            cell(row.clf_score),
            cell(row.clip),
            cell(row.fid),
            cell(row.h_dist),
            cell(row.kl_div),
        ));
    }
    csv
}

fn cmd_eval(
    model: &Path,
    dataset: &Path,
    out: &Path,
    n_prompts: Option<usize>,
    positive_class: Option<&str>,
    no_baselines: bool,
    seed: Option<u64>,
) -> Result<()> {
    let (model_manifest, params) = load_model(model)?;
    let (_, space, vocab, records) = load_dataset(dataset)?;
    let mut rc = model_manifest.run_config.clone();
    if let Some(n) = n_prompts {
        rc.eval.n_prompts = n;
    }
    if no_baselines {
        rc.eval.with_baselines = false;
    }
    if let Some(s) = seed {
        rc.sample.seed = s;
    }
    if let Some(c) = positive_class {
        rc.eval.positive_class = Some(c.to_string());
    } else if rc.eval.positive_class.is_none() {
        rc.eval.positive_class =
            rc.train.domain_filter.map(|d| d.as_str().to_string());
    }
    if rc.eval.n_prompts == 0 || records.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let probe = domain_probe(&records)?;
    // hold out the tail of the dataset as the eval split
    let start = records.len().saturating_sub(rc.eval.n_prompts);
    let eval_set = &records[start..];
    let cfg = EvalConfig {
        n_prompts: rc.eval.n_prompts,
        sample: rc.sample,
        positive_class: rc.eval.positive_class.clone(),
        with_baselines: rc.eval.with_baselines,
    };
    let report = evalx::eval_report(&params, &space, &vocab, Some(&probe), eval_set, &cfg)?;
    write_json(&out.join("report.json"), &EvalArtifact { run_config: rc, report: report.clone() })?;
    write_bytes_atomic(&out.join("report.csv"), report_csv(&report).as_bytes())?;
    let main_row = &report.rows[0];
    println!(
        "evaluated {} prompts: Clf.Score {:?} CLIP {:?} FID {:?} -> {}",
        report.n_prompts,
        main_row.clf_score,
        main_row.clip,
        main_row.fid,
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_list_parsing() {
        let d = parse_domains("texture,vector").unwrap();
        assert_eq!(d, vec![DomainLabel::Texture, DomainLabel::Vector]);
        assert!(parse_domains("texture,nope").is_err());
    }

    #[test]
    fn prompt_parsing() {
        let vocab = Vocabulary::default();
        let toks = parse_prompt(&vocab, "berry red").unwrap();
        assert_eq!(toks.len(), 2);
        assert_eq!(vocab.concept_of_token(toks[0]), Some(0));
        assert!(parse_prompt(&vocab, "").is_err());
        assert!(parse_prompt(&vocab, "berry xyzzy").is_err());
    }

    #[test]
    fn csv_layout() {
        let report = evalx::EvalReport {
            schema_version: 1,
            columns: evalx::REPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows: vec![evalx::MetricRow {
                method: "prior".into(),
                clf_score: Some(0.9),
                clip: Some(0.8),
                fid: Some(0.1),
                h_dist: None,
                kl_div: None,
            }],
            n_prompts: 1,
            sample: SampleConfig::default(),
            positive_class: None,
        };
        let csv = report_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,Clf.Score,CLIP,FID,H dist.,KL div.");
        assert_eq!(lines.next().unwrap(), "prior,0.900000,0.800000,0.100000,,");
    }
}
