//! Neuron-importance statistics and calibration corpora.
//!
//! Activation statistics average `|h| / ‖h‖₂` over tokens. Impact statistics
//! average `|h_j g_j|` where `g = ∂L/∂h` and `L` is the document's mean
//! next-token cross-entropy. Corpus-level statistics fan out per document and
//! fold the per-document sums in ascending document order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_norm, Matrix};
use crate::model::{
    forward_backward, model_forward, next_token_targets, sample_next, Decoder, Model, SamplingPolicy,
    TokenId, BOS, HARD_EXCLUSION,
};
use crate::rng::keyed_rng;
use crate::storage::model_hash;

/// Which statistic an [`ImportanceStats`] holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsKind {
    LocalActivation,
    GlobalActivation,
    GlobalImpact,
}

impl StatsKind {
    pub fn is_global(self) -> bool {
        !matches!(self, StatsKind::LocalActivation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Absolute activations divided by the token's ℓ2 norm.
    L2PerTokenAbs,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceStats {
    pub kind: StatsKind,
    /// `layers[l][j]`: score of unit `j` in layer `l`.
    pub layers: Vec<Vec<f64>>,
    pub token_count: usize,
    pub model_hash: String,
    pub normalization: Normalization,
    /// Hash of the corpus the statistic was collected on, if any.
    pub corpus_hash: Option<String>,
    /// Documents too short to contribute (impact needs two tokens).
    pub skipped_documents: usize,
}

impl ImportanceStats {
    pub fn validate(&self) -> Result<()> {
        if self.token_count == 0 {
            return Err(Error::validation("stats aggregate zero tokens"));
        }
        let Some(first) = self.layers.first() else {
            return Err(Error::validation("stats have no layers"));
        };
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != first.len() || layer.is_empty() {
                return Err(Error::validation(format!("stats layer {l} has inconsistent width")));
            }
            if let Some(j) = layer.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::validation(format!(
                    "stats layer {l} unit {j} is negative or non-finite"
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Check that these stats describe `model` (shape and hash).
    pub fn check_against(&self, model: &Model, hash: &str) -> Result<()> {
        if self.model_hash != hash {
            return Err(Error::provenance(format!(
                "{:?} stats were computed for model {}, not {}",
                self.kind, self.model_hash, hash
            )));
        }
        if self.layers.len() != model.n_layers() || self.width() != model.ffn_width() {
            return Err(Error::validation(format!(
                "stats shape {}x{} does not match model {}x{}",
                self.layers.len(),
                self.width(),
                model.n_layers(),
                model.ffn_width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    External,
    Nps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpsMetadata {
    pub config: NpsConfig,
    pub model_hash: String,
    /// Sampling steps where every token was penalized and the penalty was
    /// dropped for that step.
    pub fallback_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Vec<TokenId>>,
    pub origin: Origin,
    pub vocab_size: usize,
    pub metadata: Option<NpsMetadata>,
}

impl Corpus {
    pub fn external(documents: Vec<Vec<TokenId>>, vocab_size: usize) -> Result<Self> {
        let c = Corpus { documents, origin: Origin::External, vocab_size, metadata: None };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::validation("corpus vocab_size must be positive"));
        }
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::validation(format!("document {i} is empty")));
            }
            if let Some(&t) = doc.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::validation(format!(
                    "document {i} has token {t} outside vocab_size {}",
                    self.vocab_size
                )));
            }
        }
        if (self.origin == Origin::Nps) != self.metadata.is_some() {
            return Err(Error::validation("generation metadata must be present exactly for NPS corpora"));
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::validation("corpus has no documents"));
        }
        if self.vocab_size != model.vocab_size() {
            return Err(Error::validation(format!(
                "corpus vocab_size {} differs from model vocab_size {}",
                self.vocab_size,
                model.vocab_size()
            )));
        }
        Ok(())
    }
}

/// `|h| / ‖h‖₂` for one token; a zero row gives zeros.
pub fn normalized_magnitude(h: &[f64]) -> Vec<f64> {
    let n = l2_norm(h);
    if n == 0.0 {
        vec![0.0; h.len()]
    } else {
        h.iter().map(|v| v.abs() / n).collect()
    }
}

fn add_into(acc: &mut [Vec<f64>], part: &[Vec<f64>]) {
    for (a, p) in acc.iter_mut().zip(part) {
        for (x, y) in a.iter_mut().zip(p) {
            *x += y;
        }
    }
}

/// Per-layer sums of normalized magnitudes over the rows of each `h`.
fn activation_sums(hs: impl Iterator<Item = Matrix>) -> Vec<Vec<f64>> {
    hs.map(|h| {
        let mut acc = vec![0.0; h.cols()];
        for t in 0..h.rows() {
            for (a, v) in acc.iter_mut().zip(normalized_magnitude(h.row(t))) {
                *a += v;
            }
        }
        acc
    })
    .collect()
}

fn doc_activation_sums(model: &Model, doc: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let trace = model_forward(doc, model)?;
    Ok(activation_sums(trace.layers.into_iter().map(|l| l.h)))
}

fn mean(mut sums: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    for layer in &mut sums {
        for v in layer.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

/// Fold per-document partial sums in document order.
fn ordered_fold(model: &Model, parts: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut acc = vec![vec![0.0; model.ffn_width()]; model.n_layers()];
    for p in &parts {
        add_into(&mut acc, p);
    }
    acc
}

/// Raw per-layer local activation scores of `prompt`, without provenance.
pub fn local_activation_scores(model: &Model, prompt: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    if prompt.is_empty() {
        return Err(Error::validation("prompt must contain at least one token"));
    }
    Ok(mean(doc_activation_sums(model, prompt)?, prompt.len()))
}

pub fn local_activation_stats(model: &Model, prompt: &[TokenId]) -> Result<ImportanceStats> {
    let layers = local_activation_scores(model, prompt)?;
    Ok(ImportanceStats {
        kind: StatsKind::LocalActivation,
        layers,
        token_count: prompt.len(),
        model_hash: model_hash(model)?,
        normalization: Normalization::L2PerTokenAbs,
        corpus_hash: None,
        skipped_documents: 0,
    })
}

pub fn global_activation_stats(model: &Model, corpus: &Corpus) -> Result<ImportanceStats> {
    corpus.check_model(model)?;
    let parts = corpus
        .documents
        .par_iter()
        .map(|doc| doc_activation_sums(model, doc))
        .collect::<Result<Vec<_>>>()?;
    let n = corpus.token_count();
    Ok(ImportanceStats {
        kind: StatsKind::GlobalActivation,
        layers: mean(ordered_fold(model, parts), n),
        token_count: n,
        model_hash: model_hash(model)?,
        normalization: Normalization::L2PerTokenAbs,
        corpus_hash: Some(corpus_hash(corpus)?),
        skipped_documents: 0,
    })
}

/// Per-layer sums of `|h_j g_j|` over the document's target positions, and
/// the number of positions. `None` for documents shorter than two tokens.
fn doc_impact_sums(model: &Model, doc: &[TokenId]) -> Result<Option<(Vec<Vec<f64>>, usize)>> {
    if doc.len() < 2 {
        return Ok(None);
    }
    let (inputs, targets) = next_token_targets(doc);
    let (trace, grads) = forward_backward(model, inputs, &targets)?;
    let sums = trace
        .layers
        .iter()
        .zip(&grads.layers)
        .map(|(lt, g)| {
            let mut acc = vec![0.0; lt.h.cols()];
            for t in 0..lt.h.rows() {
                for ((a, h), gj) in acc.iter_mut().zip(lt.h.row(t)).zip(g.row(t)) {
                    *a += (h * gj).abs();
                }
            }
            acc
        })
        .collect();
    Ok(Some((sums, inputs.len())))
}

pub fn global_impact_stats(model: &Model, corpus: &Corpus) -> Result<ImportanceStats> {
    corpus.check_model(model)?;
    let parts = corpus
        .documents
        .par_iter()
        .map(|doc| doc_impact_sums(model, doc))
        .collect::<Result<Vec<_>>>()?;
    let skipped = parts.iter().filter(|p| p.is_none()).count();
    if skipped > 0 {
        log::warn!("skipped {skipped} document(s) shorter than two tokens");
    }
    let (sums, counts): (Vec<_>, Vec<_>) = parts.into_iter().flatten().unzip();
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::validation(
            "impact statistics need documents of at least two tokens",
        ));
    }
    Ok(ImportanceStats {
        kind: StatsKind::GlobalImpact,
        layers: mean(ordered_fold(model, sums), n),
        token_count: n,
        model_hash: model_hash(model)?,
        normalization: Normalization::None,
        corpus_hash: Some(corpus_hash(corpus)?),
        skipped_documents: skipped,
    })
}

/// Impact statistics of each document separately, in corpus order; short
/// documents are left out.
pub fn per_document_impact_stats(model: &Model, corpus: &Corpus) -> Result<Vec<ImportanceStats>> {
    corpus.check_model(model)?;
    let hash = model_hash(model)?;
    let parts = corpus
        .documents
        .par_iter()
        .map(|doc| doc_impact_sums(model, doc))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts
        .into_iter()
        .flatten()
        .map(|(sums, n)| ImportanceStats {
            kind: StatsKind::GlobalImpact,
            layers: mean(sums, n),
            token_count: n,
            model_hash: hash.clone(),
            normalization: Normalization::None,
            corpus_hash: None,
            skipped_documents: 0,
        })
        .collect())
}

fn corpus_hash(corpus: &Corpus) -> Result<String> {
    use crate::storage::Artifact;
    corpus.content_hash()
}

/// Null Prompt Stimulation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpsConfig {
    pub count: usize,
    /// Generated tokens per document (the leading BOS is extra).
    pub length: usize,
    pub seed: u64,
    /// Number of leading generated tokens sampled hot with the bigram penalty.
    pub warmup_tokens: usize,
    pub warmup_temperature: f64,
    pub temperature: f64,
    pub bigram_penalty: f64,
}

impl Default for NpsConfig {
    fn default() -> Self {
        NpsConfig {
            count: 64,
            length: 128,
            seed: 0,
            warmup_tokens: 10,
            warmup_temperature: 1.5,
            temperature: 1.0,
            bigram_penalty: HARD_EXCLUSION,
        }
    }
}

impl NpsConfig {
    /// Sampling policy for generated token `step` (0-based).
    pub fn policy_at(&self, step: usize) -> SamplingPolicy {
        if step < self.warmup_tokens {
            SamplingPolicy::temperature(self.warmup_temperature).with_bigram_penalty(self.bigram_penalty)
        } else {
            SamplingPolicy::temperature(self.temperature)
        }
    }
}

/// Anything that turns a token stream into next-token logits.
pub trait LogitSource {
    /// Consume `token`; return logits for the following position.
    fn push(&mut self, token: TokenId) -> Result<Vec<f64>>;
}

impl LogitSource for Decoder<'_> {
    fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        self.step(token)
    }
}

/// What happened at one generation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub policy: SamplingPolicy,
    pub token: TokenId,
    pub fell_back: bool,
}

/// Generate one NPS document from `source`: BOS followed by `cfg.length`
/// sampled tokens. The random stream depends only on `(cfg.seed, index)`.
pub fn nps_document(
    source: &mut dyn LogitSource,
    cfg: &NpsConfig,
    index: usize,
) -> Result<(Vec<TokenId>, Vec<StepInfo>)> {
    let mut rng = keyed_rng(cfg.seed, &format!("nps.doc.{index}"));
    let mut doc = vec![BOS];
    let mut steps = Vec::with_capacity(cfg.length);
    let mut logits = source.push(BOS)?;
    for step in 0..cfg.length {
        let policy = cfg.policy_at(step);
        let s = sample_next(&logits, &mut rng, &policy, &doc)?;
        doc.push(s.token);
        steps.push(StepInfo { step, policy, token: s.token, fell_back: s.fell_back });
        if step + 1 < cfg.length {
            logits = source.push(s.token)?;
        }
    }
    Ok((doc, steps))
}

pub fn nps_generate(model: &Model, cfg: &NpsConfig) -> Result<Corpus> {
    if cfg.length == 0 {
        return Err(Error::validation("NPS length must be at least one token"));
    }
    if cfg.length + 1 > model.spec.max_seq {
        return Err(Error::validation(format!(
            "NPS documents of {} tokens (BOS + {}) exceed max_seq {}",
            cfg.length + 1,
            cfg.length,
            model.spec.max_seq
        )));
    }
    let out = (0..cfg.count)
        .into_par_iter()
        .map(|i| nps_document(&mut Decoder::new(model), cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let fallback_steps = out.iter().flat_map(|(_, s)| s).filter(|s| s.fell_back).count();
    let corpus = Corpus {
        documents: out.into_iter().map(|(d, _)| d).collect(),
        origin: Origin::Nps,
        vocab_size: model.vocab_size(),
        metadata: Some(NpsMetadata { config: *cfg, model_hash: model_hash(model)?, fallback_steps }),
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Fraction of the neuron population counted as the head.
pub const HEAD_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLocality {
    /// Unit indices by decreasing impact.
    pub order: Vec<usize>,
    /// Mean and standard deviation across documents, listed in `order`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `(ln rank, ln impact)` for units with positive impact; rank is 1-based.
    pub log_log: Vec<(f64, f64)>,
    /// Share of total impact held by the top 10% of units.
    pub head_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub model_hash: String,
    pub documents: usize,
    pub layers: Vec<LayerLocality>,
}

/// Share of `total` held by the largest `HEAD_FRACTION · m` values. A
/// fractional head size takes that fraction of the boundary value, so equal
/// values give exactly the head fraction. An all-zero vector counts as equal.
pub fn head_mass(sorted_desc: &[f64]) -> f64 {
    let m = sorted_desc.len();
    let total: f64 = sorted_desc.iter().sum();
    if m == 0 {
        return 0.0;
    }
    if total <= 0.0 {
        return HEAD_FRACTION;
    }
    let size = HEAD_FRACTION * m as f64;
    let whole = size.floor() as usize;
    let mut head: f64 = sorted_desc[..whole].iter().sum();
    if whole < m {
        head += (size - whole as f64) * sorted_desc[whole];
    }
    (head / total).min(1.0)
}

pub fn impact_locality_report(stats: &ImportanceStats, per_document: &[ImportanceStats]) -> Result<LocalityReport> {
    if stats.kind != StatsKind::GlobalImpact {
        return Err(Error::validation(format!("locality report needs global_impact stats, got {:?}", stats.kind)));
    }
    stats.validate()?;
    for (i, d) in per_document.iter().enumerate() {
        if d.layers.len() != stats.layers.len() || d.width() != stats.width() {
            return Err(Error::validation(format!("per-document stats {i} have a different shape")));
        }
    }
    let n = per_document.len();
    let layers = stats
        .layers
        .iter()
        .enumerate()
        .map(|(l, scores)| {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let (mut mean, mut std) = (Vec::new(), Vec::new());
            for &j in &order {
                let vals: Vec<f64> = per_document.iter().map(|d| d.layers[l][j]).collect();
                let mu = if n == 0 { scores[j] } else { vals.iter().sum::<f64>() / n as f64 };
                let var = if n < 2 {
                    0.0
                } else {
                    vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64
                };
                mean.push(mu);
                std.push(var.sqrt());
            }
            let sorted: Vec<f64> = order.iter().map(|&j| scores[j]).collect();
            let log_log = sorted
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(r, v)| (((r + 1) as f64).ln(), v.ln()))
                .collect();
            LayerLocality { order, mean, std, log_log, head_mass: head_mass(&sorted) }
        })
        .collect();
    Ok(LocalityReport { model_hash: stats.model_hash.clone(), documents: n, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelSpec};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalized_magnitude_examples() {
        assert!(close(&normalized_magnitude(&[1.0, 2.0, 2.0]), &[1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0], 1e-15));
        assert_eq!(normalized_magnitude(&[-1.0, 2.0, 2.0]), normalized_magnitude(&[1.0, 2.0, 2.0]));
        assert_eq!(normalized_magnitude(&[0.0, 0.0]), vec![0.0, 0.0]);
        let h = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sums = activation_sums(std::iter::once(h));
        assert_eq!(mean(sums, 2), vec![vec![0.5, 0.5]]);
    }

    #[test]
    fn scale_invariance_is_exact_for_powers_of_two() {
        let h = [0.3, -1.7, 0.02, 4.4];
        let scaled: Vec<f64> = h.iter().map(|v| v * 8.0).collect();
        assert_eq!(normalized_magnitude(&h), normalized_magnitude(&scaled));
    }

    fn model() -> Model {
        init_model(&ModelSpec { vocab_size: 16, d_model: 8, ffn_width: 12, n_heads: 2, ..ModelSpec::default() }, None)
            .unwrap()
    }

    #[test]
    fn single_document_global_equals_local() {
        let m = model();
        let doc = vec![0, 3, 5, 7, 1];
        let local = local_activation_stats(&m, &doc).unwrap();
        let corpus = Corpus::external(vec![doc], 16).unwrap();
        let global = global_activation_stats(&m, &corpus).unwrap();
        assert_eq!(local.layers, global.layers);
    }

    #[test]
    fn duplicated_corpus_keeps_means() {
        let m = model();
        let docs = vec![vec![0, 3, 5], vec![2, 2, 9, 1]];
        let a = global_activation_stats(&m, &Corpus::external(docs.clone(), 16).unwrap()).unwrap();
        let dup: Vec<_> = docs.iter().chain(&docs).cloned().collect();
        let b = global_activation_stats(&m, &Corpus::external(dup, 16).unwrap()).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert!(close(x, y, 1e-14));
        }
    }

    #[test]
    fn empty_inputs_rejected() {
        let m = model();
        assert!(local_activation_stats(&m, &[]).is_err());
        let empty = Corpus::external(vec![], 16).unwrap();
        assert!(global_activation_stats(&m, &empty).is_err());
        let short = Corpus::external(vec![vec![3]], 16).unwrap();
        assert!(global_impact_stats(&m, &short).is_err());
    }

    #[test]
    fn impact_skips_short_documents() {
        let m = model();
        let c = Corpus::external(vec![vec![3], vec![1, 4, 2]], 16).unwrap();
        let s = global_impact_stats(&m, &c).unwrap();
        assert_eq!(s.skipped_documents, 1);
        assert_eq!(s.token_count, 2);
        s.validate().unwrap();
    }

    #[test]
    fn head_mass_edges() {
        assert!((head_mass(&[1.0; 64]) - 0.1).abs() < 1e-15);
        let mut one = vec![0.0; 64];
        one[0] = 5.0;
        assert_eq!(head_mass(&one), 1.0);
    }

    #[test]
    fn nps_policy_schedule() {
        let cfg = NpsConfig::default();
        assert_eq!(cfg.policy_at(9).temperature, 1.5);
        assert_eq!(cfg.policy_at(9).bigram_penalty, Some(HARD_EXCLUSION));
        assert_eq!(cfg.policy_at(10).temperature, 1.0);
        assert_eq!(cfg.policy_at(10).bigram_penalty, None);
    }

    #[test]
    fn nps_is_deterministic_and_zero_count_is_empty() {
        let m = model();
        let cfg = NpsConfig { count: 3, length: 20, seed: 11, ..NpsConfig::default() };
        let a = nps_generate(&m, &cfg).unwrap();
        assert_eq!(a, nps_generate(&m, &cfg).unwrap());
        assert!(a.documents.iter().all(|d| d.len() == 21 && d[0] == BOS));
        let empty = nps_generate(&m, &NpsConfig { count: 0, ..cfg }).unwrap();
        assert!(empty.documents.is_empty());
        assert!(global_activation_stats(&m, &empty).is_err());
    }
}
