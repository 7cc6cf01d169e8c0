//! On-disk artifact layouts shared by the CLI commands: dataset directories
//! (manifest + tensors + PPM previews) and model directories (manifest +
//! flat weight tensor). Records themselves are regenerated from the manifest
//! seed on load and verified against the stored fingerprint, keeping dataset
//! directories small and bit-reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prior::{PriorConfig, PriorParams};
use crate::synthspace::{
    gen_dataset, DatasetManifestInfo, DatasetRecord, EmbeddingSpace, Vocabulary,
};
use crate::tensorio::{read_json, read_tensor, write_bytes_atomic, write_json, write_tensor, TensorFile};
use crate::train::{dataset_fingerprint, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.json";
pub const DATASET_EMBS: &str = "image_embs.prft";
pub const DATASET_HISTS: &str = "lab_hists.prft";
pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_WEIGHTS: &str = "weights.prft";
/// Full training report including wall-clock timing; timing makes this the
/// one artifact excluded from byte-for-byte reproducibility.
pub const TRAIN_REPORT: &str = "train_report.json";
pub const PREVIEW_COUNT: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub info: DatasetManifestInfo,
    pub fingerprint: u64,
}

/// Writes manifest, embedding/histogram tensors and a few PPM previews.
pub fn save_dataset(
    dir: &Path,
    run_config: &RunConfig,
    records: &[DatasetRecord],
    info: &DatasetManifestInfo,
) -> Result<()> {
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        run_config: run_config.clone(),
        info: info.clone(),
        fingerprint: dataset_fingerprint(&refs),
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    let d = run_config.space.dim;
    let mut embs = Vec::with_capacity(records.len() * d);
    for r in records {
        embs.extend_from_slice(&r.image_emb.vec);
    }
    write_tensor(
        &dir.join(DATASET_EMBS),
        &TensorFile::new(vec![records.len() as u64, d as u64], embs)?,
    )?;
    let bins = records.first().map(|r| r.lab_hist.values.len()).unwrap_or(0);
    let mut hists = Vec::with_capacity(records.len() * bins);
    for r in records {
        hists.extend(r.lab_hist.values.iter().map(|v| *v as f32));
    }
    write_tensor(
        &dir.join(DATASET_HISTS),
        &TensorFile::new(vec![records.len() as u64, bins as u64], hists)?,
    )?;
    for r in records.iter().take(PREVIEW_COUNT) {
        let name = format!("previews/record_{:04}.ppm", r.id);
        write_bytes_atomic(&dir.join(name), &r.patch.to_ppm())?;
    }
    Ok(())
}

/// Reads the manifest, regenerates the records from the embedded config, and
/// verifies the fingerprint.
pub fn load_dataset(
    dir: &Path,
) -> Result<(DatasetManifest, EmbeddingSpace, Vocabulary, Vec<DatasetRecord>)> {
    let manifest_path = dir.join(DATASET_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::invalid(format!("no dataset manifest at {manifest_path:?}")));
    }
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset schema version {}",
            manifest.schema_version
        )));
    }
    let vocab = Vocabulary::default();
    let space = EmbeddingSpace::new(manifest.run_config.space, &vocab)?;
    let (records, _) = gen_dataset(
        &space,
        &vocab,
        manifest.info.n,
        manifest.info.domain_mix,
        manifest.info.seed,
    )?;
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    if dataset_fingerprint(&refs) != manifest.fingerprint {
        return Err(Error::format(
            "dataset fingerprint mismatch: manifest does not match regenerated records",
        ));
    }
    Ok((manifest, space, vocab, records))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub prior_config: PriorConfig,
    pub final_loss: f32,
    pub loss_curve: Vec<(usize, f32)>,
    pub n_records: usize,
    pub dataset_fingerprint: u64,
}

/// All parameter tensors concatenated in their canonical order.
pub fn params_to_tensor(params: &PriorParams) -> TensorFile {
    let mut clone = params.clone();
    let mut data = Vec::new();
    for s in clone.param_slices_mut() {
        data.extend_from_slice(s);
    }
    TensorFile::new(vec![data.len() as u64], data).expect("dims match by construction")
}

pub fn params_from_tensor(config: PriorConfig, tensor: &TensorFile) -> Result<PriorParams> {
    let mut params = PriorParams::init(config, 0)?;
    let expect = params.param_count();
    if tensor.data.len() != expect {
        return Err(Error::format(format!(
            "weight tensor holds {} values but the config requires {expect}",
            tensor.data.len()
        )));
    }
    let mut offset = 0usize;
    for slice in params.param_slices_mut() {
        slice.copy_from_slice(&tensor.data[offset..offset + slice.len()]);
        offset += slice.len();
    }
    Ok(params)
}

pub fn save_model(
    dir: &Path,
    run_config: &RunConfig,
    params: &PriorParams,
    report: &TrainReport,
) -> Result<()> {
    let manifest = ModelManifest {
        schema_version: SCHEMA_VERSION,
        run_config: run_config.clone(),
        prior_config: params.config,
        final_loss: report.final_loss,
        loss_curve: report.loss_curve.clone(),
        n_records: report.n_records,
        dataset_fingerprint: report.dataset_fingerprint,
    };
    write_json(&dir.join(MODEL_MANIFEST), &manifest)?;
    write_tensor(&dir.join(MODEL_WEIGHTS), &params_to_tensor(params))?;
    write_json(&dir.join(TRAIN_REPORT), report)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(ModelManifest, PriorParams)> {
    let manifest_path = dir.join(MODEL_MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::invalid(format!("no model manifest at {manifest_path:?}")));
    }
    let manifest: ModelManifest = read_json(&manifest_path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "unsupported model schema version {}",
            manifest.schema_version
        )));
    }
    let tensor = read_tensor(&dir.join(MODEL_WEIGHTS))?;
    let params = params_from_tensor(manifest.prior_config, &tensor)?;
    Ok((manifest, params))
}
