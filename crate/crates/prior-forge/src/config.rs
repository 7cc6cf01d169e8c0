//! The run configuration: one nested, human-readable document covering every
//! stage of the pipeline. Every field has a default, unknown keys are errors,
//! and the full document is embedded in every artifact it produces.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::prior::PriorConfig;
use crate::sample::SampleConfig;
use crate::synthspace::{DomainLabel, SpaceConfig, NUM_DOMAINS};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n: usize,
    pub seed: u64,
    /// Probability of each domain (texture, vector, isolated, photo).
    pub domain_mix: [f64; NUM_DOMAINS],
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n: 10_000, seed: 0, domain_mix: [0.25; NUM_DOMAINS] }
    }
}

impl DatasetSection {
    /// Restrict the mix to the listed domains, uniformly.
    pub fn with_domains(mut self, domains: &[DomainLabel]) -> Self {
        let mut mix = [0.0; NUM_DOMAINS];
        for d in domains {
            mix[d.index()] = 1.0 / domains.len() as f64;
        }
        self.domain_mix = mix;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_prompts: usize,
    /// Probe class reported in the Clf.Score column.
    pub positive_class: Option<String>,
    pub with_baselines: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_prompts: 200, positive_class: None, with_baselines: true }
    }
}

/// The full pipeline configuration. Serialized (JSON) into dataset
/// manifests, model files, and reports so every artifact is reproducible
/// from its own contents.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub space: SpaceConfig,
    pub dataset: DatasetSection,
    pub model: PriorConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.dataset.n, 10_000);
        assert_eq!(cfg.sample.steps, 100);
        assert_eq!(cfg.sample.k, 10);
        assert!((cfg.sample.guidance_scale - 3.0).abs() < 1e-9);
        let json = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn empty_document_uses_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.dataset.n, RunConfig::default().dataset.n);
        let cfg = RunConfig::from_json(r#"{"train": {"steps": 7}}"#).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"nope": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"stepz": 7}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"space": {"dim": 64, "extra": true}}"#).is_err());
    }

    #[test]
    fn domain_restriction() {
        let ds = DatasetSection::default().with_domains(&[DomainLabel::Texture]);
        assert_eq!(ds.domain_mix, [1.0, 0.0, 0.0, 0.0]);
        let ds = DatasetSection::default()
            .with_domains(&[DomainLabel::Vector, DomainLabel::Photo]);
        assert_eq!(ds.domain_mix, [0.0, 0.5, 0.0, 0.5]);
    }
}
