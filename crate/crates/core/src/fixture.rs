//! Seeded drift fixture for the Jaccard and perplexity studies.
//!
//! Each document opens with a topic segment drawn uniformly from a small
//! per-document token subset, then continues with tokens sampled from the
//! model itself. The prompt sits inside the topic segment, so the activation
//! pattern of the full document drifts away from what the prompt shows,
//! toward the model's own regime. The model carries planted units, so the
//! global statistics have a real critical set to find.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{global_activation_stats, global_impact_stats, nps_generate, Corpus, ImportanceStats, NpsConfig};
use crate::model::{init_model, sample_next, Decoder, Model, ModelSpec, PlantedSpec, SamplingPolicy, TokenId, BOS};
use crate::rng::keyed_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub seed: u64,
    pub spec: ModelSpec,
    pub planted_per_layer: usize,
    pub planted_scale: f64,
    pub documents: usize,
    pub doc_len: usize,
    pub prompt_len: usize,
    /// Length of the opening topic segment; the prompt is its prefix.
    pub topic_len: usize,
    /// Size of each document's topic token subset.
    pub topic_vocab: usize,
    pub continuation_temperature: f64,
    pub nps: NpsConfig,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            seed: 0,
            spec: ModelSpec::default(),
            planted_per_layer: 8,
            planted_scale: crate::model::DEFAULT_PLANTED_SCALE,
            documents: 8,
            doc_len: 200,
            prompt_len: 20,
            topic_len: 40,
            topic_vocab: 3,
            continuation_temperature: 1.0,
            nps: NpsConfig::default(),
        }
    }
}

impl DriftConfig {
    pub fn with_seed(seed: u64) -> Self {
        DriftConfig::default().reseeded(seed)
    }

    /// The same settings under another seed (model, documents and NPS).
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.spec.seed = seed;
        c.nps.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if !(self.prompt_len >= 1 && self.prompt_len <= self.topic_len && self.topic_len < self.doc_len) {
            return Err(Error::validation("need 1 <= prompt_len <= topic_len < doc_len"));
        }
        if self.doc_len > self.spec.max_seq {
            return Err(Error::validation("doc_len exceeds max_seq"));
        }
        if self.topic_vocab == 0 || self.topic_vocab >= self.spec.vocab_size {
            return Err(Error::validation("topic_vocab must lie in [1, vocab_size)"));
        }
        if self.planted_per_layer > self.spec.ffn_width {
            return Err(Error::validation("more planted units than FFN width"));
        }
        Ok(())
    }
}

pub struct DriftFixture {
    pub config: DriftConfig,
    pub model: Model,
    pub planted: PlantedSpec,
    pub documents: Vec<Vec<TokenId>>,
    pub nps: Corpus,
    pub global_activation: ImportanceStats,
    pub global_impact: ImportanceStats,
}

/// Planted units: a random subset per layer, keyed by the seed.
pub fn planted_units(cfg: &DriftConfig) -> PlantedSpec {
    let layers = (0..cfg.spec.n_layers)
        .map(|l| {
            let mut rng = keyed_rng(cfg.seed, &format!("drift.planted.{l}"));
            let mut v = sample(&mut rng, cfg.spec.ffn_width, cfg.planted_per_layer).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    PlantedSpec { layers, scale: cfg.planted_scale }
}

/// One drift document: BOS, topic tokens up to `topic_len`, then model
/// samples up to `doc_len`.
pub fn drift_document(model: &Model, cfg: &DriftConfig, index: usize) -> Result<Vec<TokenId>> {
    let mut rng = keyed_rng(cfg.seed, &format!("drift.doc.{index}"));
    let v = cfg.spec.vocab_size;
    // topic tokens avoid BOS
    let topic: Vec<TokenId> = sample(&mut rng, v - 1, cfg.topic_vocab).into_iter().map(|t| t + 1).collect();
    let mut doc = vec![BOS];
    while doc.len() < cfg.topic_len {
        doc.push(topic[rng.random_range(0..topic.len())]);
    }
    let mut dec = Decoder::new(model);
    let mut logits = Vec::new();
    for &t in &doc {
        logits = dec.step(t)?;
    }
    let policy = SamplingPolicy::temperature(cfg.continuation_temperature);
    while doc.len() < cfg.doc_len {
        let s = sample_next(&logits, &mut rng, &policy, &doc)?;
        doc.push(s.token);
        if doc.len() < cfg.doc_len {
            logits = dec.step(s.token)?;
        }
    }
    Ok(doc)
}

pub fn build_drift_fixture(cfg: &DriftConfig) -> Result<DriftFixture> {
    cfg.validate()?;
    let planted = planted_units(cfg);
    let model = init_model(&cfg.spec, Some(&planted))?;
    let documents = (0..cfg.documents).map(|i| drift_document(&model, cfg, i)).collect::<Result<Vec<_>>>()?;
    let nps = nps_generate(&model, &cfg.nps)?;
    let global_activation = global_activation_stats(&model, &nps)?;
    let global_impact = global_impact_stats(&model, &nps)?;
    Ok(DriftFixture { config: cfg.clone(), model, planted, documents, nps, global_activation, global_impact })
}
