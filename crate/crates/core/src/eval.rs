//! Perplexity, top-K KL divergence, Jaccard-to-oracle and the per-method
//! comparison study.
//!
//! References are the dense model's greedy continuations of each prompt.
//! Every metric is computed per document and summarized as a mean with a
//! standard error `s / √n` over documents.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::TiePolicy;
use crate::error::{Error, Result};
use crate::importance::{local_activation_scores, ImportanceStats, StatsKind};
use crate::linalg::{log_softmax, softmax};
use crate::model::{greedy_generate, model_forward, Model, TokenId};
use crate::pruning::{compress, compress_layers, select_layers, Method, NeuronMask};
use crate::storage::{model_hash, write_atomic};

/// `exp` of the mean negative log-likelihood of `targets` under the logit
/// rows, one row per target.
pub fn perplexity_from_logits(rows: &[Vec<f64>], targets: &[TokenId]) -> Result<f64> {
    Ok(mean_nll(rows, targets)?.exp())
}

fn mean_nll(rows: &[Vec<f64>], targets: &[TokenId]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::validation("perplexity needs a non-empty reference"));
    }
    if rows.len() != targets.len() {
        return Err(Error::validation(format!("{} logit rows for {} targets", rows.len(), targets.len())));
    }
    let mut total = 0.0;
    for (row, &t) in rows.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::validation(format!("target {t} out of range for vocab {}", row.len())));
        }
        total -= log_softmax(row)[t];
    }
    Ok(total / targets.len() as f64)
}

/// Logit rows predicting each token of `reference` after `prefix`.
fn reference_rows(model: &Model, prefix: &[TokenId], reference: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    if prefix.is_empty() {
        return Err(Error::validation("the conditioning prefix must be non-empty"));
    }
    if reference.is_empty() {
        return Err(Error::validation("perplexity needs a non-empty reference"));
    }
    let mut inputs = prefix.to_vec();
    inputs.extend_from_slice(&reference[..reference.len() - 1]);
    let trace = model_forward(&inputs, model)?;
    Ok((prefix.len() - 1..inputs.len()).map(|t| trace.logits.row(t).to_vec()).collect())
}

/// Perplexity of `model` on `reference`, each token conditioned on `prefix`
/// plus the preceding reference tokens.
pub fn perplexity(model: &Model, reference: &[TokenId], prefix: &[TokenId]) -> Result<f64> {
    let rows = reference_rows(model, prefix, reference)?;
    perplexity_from_logits(&rows, reference)
}

/// Top-K KL divergence averaged over positions, and the mean reference mass
/// of the K tokens. K is taken from the reference distribution and the
/// divergence is not renormalized.
pub fn topk_kld(ref_logits: &[Vec<f64>], test_logits: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if ref_logits.len() != test_logits.len() || ref_logits.is_empty() {
        return Err(Error::validation("KLD needs equal, non-zero numbers of reference and test rows"));
    }
    let mut kld = 0.0;
    let mut mass = 0.0;
    for (r, t) in ref_logits.iter().zip(test_logits) {
        let v = r.len();
        if t.len() != v {
            return Err(Error::validation("reference and test vocabularies differ"));
        }
        if k == 0 || k > v {
            return Err(Error::validation(format!("top-K must lie in [1, {v}], got {k}")));
        }
        let p = softmax(r);
        let lp = log_softmax(r);
        let lq = log_softmax(t);
        let mut idx: Vec<usize> = (0..v).collect();
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        for &i in &idx[..k] {
            kld += p[i] * (lp[i] - lq[i]);
            mass += p[i];
        }
    }
    let n = ref_logits.len() as f64;
    let (kld, mass) = (kld / n, mass / n);
    if !kld.is_finite() {
        return Err(Error::Numeric { layer: 0, detail: "non-finite KL divergence".into() });
    }
    Ok((kld, mass))
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets counting as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Top-k units per layer by local activation over the whole document.
pub fn oracle_critical_set(model: &Model, document: &[TokenId], k: usize, tie_policy: TiePolicy) -> Result<Vec<Vec<usize>>> {
    let scores = local_activation_scores(model, document)?;
    select_layers(Some(&scores), None, k, 1.0, tie_policy)
}

/// Desk-scale default for K: `min(100, V / 2)`, at least one.
pub fn default_top_k(vocab_size: usize) -> usize {
    (vocab_size / 2).clamp(1, 100)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanSe {
    /// Mean and sample standard deviation over `√n`; a single value has zero
    /// standard error.
    pub fn of(values: &[f64]) -> MeanSe {
        let n = values.len();
        if n == 0 {
            return MeanSe { mean: f64::NAN, stderr: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return MeanSe { mean, stderr: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        MeanSe { mean, stderr: (var / n as f64).sqrt() }
    }
}

/// A row of the comparison: the dense model or one sparsification method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Dense,
    Sparse(Method),
}

impl EvalMethod {
    pub fn name(self) -> &'static str {
        match self {
            EvalMethod::Dense => "dense",
            EvalMethod::Sparse(m) => m.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodResult {
    pub method: EvalMethod,
    pub ppl: MeanSe,
    pub kld: MeanSe,
    /// Mean reference probability mass of the top-K tokens.
    pub ref_mass: f64,
    /// Mean Jaccard to the oracle set per layer; absent for the dense row.
    pub jaccard: Option<Vec<f64>>,
    /// Per-document values, in document order.
    pub ppl_per_doc: Vec<f64>,
    pub kld_per_doc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub model_hash: String,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub width: usize,
    pub lambda: f64,
    pub top_k: usize,
    pub prompt_len: usize,
    pub documents: usize,
    pub stats_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    pub methods: Vec<MethodResult>,
}

const MASS_SLACK: f64 = 1e-12;

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for r in &self.methods {
            let name = r.method.name();
            if !(r.ppl.mean >= 1.0 && r.ppl.mean.is_finite()) {
                return Err(Error::validation(format!("{name}: perplexity {} below 1 or non-finite", r.ppl.mean)));
            }
            if r.ppl_per_doc.iter().any(|p| !(*p >= 1.0 && p.is_finite())) {
                return Err(Error::validation(format!("{name}: per-document perplexity below 1")));
            }
            let finite = [r.ppl.stderr, r.kld.mean, r.kld.stderr, r.ref_mass]
                .iter()
                .chain(&r.kld_per_doc)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::validation(format!("{name}: non-finite metric")));
            }
            if !(r.ref_mass > 0.0 && r.ref_mass <= 1.0 + MASS_SLACK) {
                return Err(Error::validation(format!("{name}: top-K mass {} outside (0, 1]", r.ref_mass)));
            }
            if let Some(j) = &r.jaccard {
                if j.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::validation(format!("{name}: Jaccard outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, method: EvalMethod) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == method)
    }
}

/// Precomputed corpus-level statistics available to the global and fused
/// methods.
#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalStats<'a> {
    pub activation: Option<&'a ImportanceStats>,
    pub impact: Option<&'a ImportanceStats>,
}

impl GlobalStats<'_> {
    fn for_kind(&self, kind: StatsKind) -> Option<&ImportanceStats> {
        match kind {
            StatsKind::GlobalActivation => self.activation,
            StatsKind::GlobalImpact => self.impact,
            StatsKind::LocalActivation => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub top_k: usize,
    /// Reference continuation length; by default each document's remainder
    /// after the prompt.
    pub gen_len: Option<usize>,
    pub tie_policy: TiePolicy,
}

/// Everything about one document that does not depend on the budget `k`.
pub struct PreparedDocument {
    pub prompt: Vec<TokenId>,
    /// Dense greedy continuation of the prompt.
    pub reference: Vec<TokenId>,
    dense_rows: Vec<Vec<f64>>,
    dense: (f64, f64, f64),
    local_scores: Vec<Vec<f64>>,
    full_scores: Vec<Vec<f64>>,
}

fn doc_metrics(test: &Model, r: &PreparedDocument, top_k: usize) -> Result<(f64, f64, f64)> {
    let rows = reference_rows(test, &r.prompt, &r.reference)?;
    let ppl = perplexity_from_logits(&rows, &r.reference)?;
    let (kld, mass) = topk_kld(&r.dense_rows, &rows, top_k)?;
    Ok((ppl, kld, mass))
}

/// Dense references and activation scores for each document.
pub fn prepare_documents(
    model: &Model,
    documents: &[Vec<TokenId>],
    prompt_len: usize,
    opts: &EvalOptions,
) -> Result<Vec<PreparedDocument>> {
    if documents.is_empty() {
        return Err(Error::validation("method comparison needs at least one document"));
    }
    if prompt_len == 0 {
        return Err(Error::validation("prompt_len must be at least one token"));
    }
    if let Some((i, d)) = documents.iter().enumerate().find(|(_, d)| d.len() <= prompt_len) {
        return Err(Error::validation(format!(
            "prompt_len {prompt_len} is not shorter than document {i} ({} tokens)",
            d.len()
        )));
    }
    documents
        .par_iter()
        .map(|doc| {
            let prompt = doc[..prompt_len].to_vec();
            let gen_len = opts.gen_len.unwrap_or(doc.len() - prompt_len);
            let reference = greedy_generate(model, &prompt, gen_len)?;
            let dense_rows = reference_rows(model, &prompt, &reference)?;
            let mut p = PreparedDocument {
                local_scores: local_activation_scores(model, &prompt)?,
                full_scores: local_activation_scores(model, doc)?,
                prompt,
                reference,
                dense_rows,
                dense: (0.0, 0.0, 0.0),
            };
            p.dense = doc_metrics(model, &p, opts.top_k)?;
            Ok(p)
        })
        .collect()
}

/// Compare methods on `documents`.
///
/// Per document: the prompt is the first `prompt_len` tokens, the oracle set
/// comes from the whole document, each method's mask from the prompt (plus
/// `globals`), and PPL/KLD are measured on the dense model's greedy
/// continuation of the prompt using the compressed model.
#[allow(clippy::too_many_arguments)]
pub fn method_comparison(
    model: &Model,
    documents: &[Vec<TokenId>],
    prompt_len: usize,
    k: usize,
    lambda: f64,
    methods: &[Method],
    globals: GlobalStats<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let prepared = prepare_documents(model, documents, prompt_len, opts)?;
    compare_prepared(model, &prepared, k, lambda, methods, globals, opts)
}

fn summarize(method: EvalMethod, vals: Vec<(f64, f64, f64)>, jac: Option<Vec<Vec<f64>>>) -> MethodResult {
    let ppl: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let kld: Vec<f64> = vals.iter().map(|v| v.1).collect();
    let mass = vals.iter().map(|v| v.2).sum::<f64>() / vals.len() as f64;
    let jaccard = jac.map(|per_doc| {
        let n = per_doc.len() as f64;
        let layers = per_doc[0].len();
        (0..layers).map(|l| per_doc.iter().map(|d| d[l]).sum::<f64>() / n).collect()
    });
    MethodResult { method, ppl: MeanSe::of(&ppl), kld: MeanSe::of(&kld), ref_mass: mass, jaccard, ppl_per_doc: ppl, kld_per_doc: kld }
}

/// Evaluate fixed masks, each applied unchanged to every document.
///
/// With `with_oracle`, each row also carries its Jaccard to the per-document
/// oracle set and an oracle row is appended.
pub fn compare_masks(
    model: &Model,
    prepared: &[PreparedDocument],
    masks: &[NeuronMask],
    with_oracle: bool,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let first = masks.first().ok_or_else(|| Error::validation("need at least one mask"))?;
    if prepared.is_empty() {
        return Err(Error::validation("method comparison needs at least one document"));
    }
    let hash = model_hash(model)?;
    let mut stats_hashes: Vec<String> = Vec::new();
    let mut compressed = Vec::with_capacity(masks.len());
    for mask in masks {
        if mask.k != first.k {
            return Err(Error::validation(format!("masks disagree on k ({} vs {})", mask.k, first.k)));
        }
        compressed.push(compress(model, mask)?);
        for h in &mask.stats_hashes {
            if !stats_hashes.contains(h) {
                stats_hashes.push(h.clone());
            }
        }
    }
    let k = first.k;
    let outs = prepared
        .par_iter()
        .map(|r| -> Result<Vec<((f64, f64, f64), Vec<f64>)>> {
            let oracle = select_layers(Some(&r.full_scores), None, k, 1.0, opts.tie_policy)?;
            let mut row: Vec<((f64, f64, f64), Vec<f64>)> = masks
                .iter()
                .zip(&compressed)
                .map(|(mask, small)| {
                    let jac = mask.layers.iter().zip(&oracle).map(|(a, b)| jaccard(a, b)).collect();
                    Ok((doc_metrics(small, r, opts.top_k)?, jac))
                })
                .collect::<Result<_>>()?;
            if with_oracle {
                let small = compress_layers(model, &oracle)?;
                row.push((doc_metrics(&small, r, opts.top_k)?, vec![1.0; oracle.len()]));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<EvalMethod> = masks.iter().map(|m| EvalMethod::Sparse(m.method)).collect();
    if with_oracle {
        rows.push(EvalMethod::Sparse(Method::Oracle));
    }
    let mut results = vec![summarize(EvalMethod::Dense, prepared.iter().map(|p| p.dense).collect(), None)];
    for (i, &method) in rows.iter().enumerate() {
        let vals = outs.iter().map(|o| o[i].0).collect();
        let jac = with_oracle.then(|| outs.iter().map(|o| o[i].1.clone()).collect());
        results.push(summarize(method, vals, jac));
    }
    let report = EvalReport {
        metadata: RunMetadata {
            model_hash: hash,
            seeds: Vec::new(),
            k,
            width: model.ffn_width(),
            lambda: first.lambda,
            top_k: opts.top_k,
            prompt_len: prepared[0].prompt.len(),
            documents: prepared.len(),
            stats_hashes,
        },
        methods: results,
    };
    report.validate()?;
    Ok(report)
}

/// [`method_comparison`] on documents already run through
/// [`prepare_documents`] with the same options.
pub fn compare_prepared(
    model: &Model,
    prepared: &[PreparedDocument],
    k: usize,
    lambda: f64,
    methods: &[Method],
    globals: GlobalStats<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if prepared.is_empty() {
        return Err(Error::validation("method comparison needs at least one document"));
    }
    let m = model.ffn_width();
    if k == 0 || k > m {
        return Err(Error::validation(format!("k must lie in [1, {m}], got {k}")));
    }
    crate::aggregation::check_lambda(lambda)?;
    let hash = model_hash(model)?;
    let mut stats_hashes = Vec::new();
    for method in methods {
        if let Some(kind) = method.global_kind() {
            let s = globals
                .for_kind(kind)
                .ok_or_else(|| Error::validation(format!("method {} needs {kind:?} stats", method.name())))?;
            if s.kind != kind {
                return Err(Error::provenance(format!("expected {kind:?} stats, got {:?}", s.kind)));
            }
            s.check_against(model, &hash)?;
        }
    }
    for s in [globals.activation, globals.impact].into_iter().flatten() {
        use crate::storage::Artifact;
        stats_hashes.push(s.content_hash()?);
    }

    let outs = prepared
        .par_iter()
        .map(|r| -> Result<Vec<((f64, f64, f64), Vec<f64>)>> {
            let oracle = select_layers(Some(&r.full_scores), None, k, 1.0, opts.tie_policy)?;
            methods
                .iter()
                .map(|&method| {
                    let layers = match method {
                        Method::Oracle => oracle.clone(),
                        _ => {
                            let g = method.global_kind().and_then(|kind| globals.for_kind(kind));
                            select_layers(
                                method.needs_local().then_some(r.local_scores.as_slice()),
                                g.map(|s| s.layers.as_slice()),
                                k,
                                method.effective_lambda(lambda),
                                opts.tie_policy,
                            )?
                        }
                    };
                    let jac: Vec<f64> = layers.iter().zip(&oracle).map(|(a, b)| jaccard(a, b)).collect();
                    let compressed = compress_layers(model, &layers)?;
                    Ok((doc_metrics(&compressed, r, opts.top_k)?, jac))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut results = vec![summarize(EvalMethod::Dense, prepared.iter().map(|p| p.dense).collect(), None)];
    for (i, &method) in methods.iter().enumerate() {
        let vals = outs.iter().map(|o| o[i].0).collect();
        let jac = outs.iter().map(|o| o[i].1.clone()).collect();
        results.push(summarize(EvalMethod::Sparse(method), vals, Some(jac)));
    }
    let report = EvalReport {
        metadata: RunMetadata {
            model_hash: hash,
            seeds: Vec::new(),
            k,
            width: m,
            lambda,
            top_k: opts.top_k,
            prompt_len: prepared[0].prompt.len(),
            documents: prepared.len(),
            stats_hashes,
        },
        methods: results,
    };
    report.validate()?;
    Ok(report)
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Jaccard-to-oracle table in the radar layout: one row per method, one
/// column per layer.
pub fn jaccard_radar_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let layers = report.methods.iter().find_map(|r| r.jaccard.as_ref().map(Vec::len)).unwrap_or(0);
    let mut header = vec!["method".to_string()];
    header.extend((0..layers).map(|l| format!("layer_{l}")));
    let rows = report
        .methods
        .iter()
        .filter_map(|r| {
            r.jaccard.as_ref().map(|j| {
                std::iter::once(r.method.name().to_string()).chain(j.iter().map(|v| v.to_string())).collect()
            })
        })
        .collect();
    csv_bytes(&header.iter().map(String::as_str).collect::<Vec<_>>(), rows)
}

/// One row of the sweep layout `(density, method, metric, mean, stderr)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub density: f64,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
}

pub const SWEEP_HEADER: [&str; 5] = ["density", "method", "metric", "mean", "stderr"];

/// Sweep-layout rows for one report: PPL, KLD and reference mass per method.
pub fn sweep_rows(report: &EvalReport) -> Vec<SweepRow> {
    let density = report.metadata.k as f64 / report.metadata.width as f64;
    let mut rows = Vec::new();
    for r in &report.methods {
        let m = r.method.name().to_string();
        rows.push(SweepRow { density, method: m.clone(), metric: "ppl".into(), mean: r.ppl.mean, stderr: r.ppl.stderr });
        rows.push(SweepRow { density, method: m.clone(), metric: "kld".into(), mean: r.kld.mean, stderr: r.kld.stderr });
        rows.push(SweepRow { density, method: m, metric: "ref_mass".into(), mean: r.ref_mass, stderr: 0.0 });
    }
    rows
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let body = rows
        .iter()
        .map(|r| vec![r.density.to_string(), r.method.clone(), r.metric.clone(), r.mean.to_string(), r.stderr.to_string()])
        .collect();
    csv_bytes(&SWEEP_HEADER, body)
}

pub fn write_csv(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelSpec};

    #[test]
    fn uniform_predictor_perplexity_is_vocab() {
        let rows = vec![vec![0.0; 13]; 5];
        let p = perplexity_from_logits(&rows, &[1, 2, 3, 4, 5]).unwrap();
        assert!((p - 13.0).abs() <= 1e-9);
        assert!(perplexity_from_logits(&[], &[]).is_err());
    }

    #[test]
    fn single_token_perplexity_is_inverse_probability() {
        let row = vec![0.0, 1.0, -0.5];
        let p = softmax(&row)[1];
        assert!((perplexity_from_logits(&[row], &[1]).unwrap() - 1.0 / p).abs() < 1e-12);
    }

    #[test]
    fn kld_identities() {
        let a = vec![vec![0.3, -1.0, 2.0, 0.1], vec![1.0, 1.0, 0.0, -3.0]];
        let (k, m) = topk_kld(&a, &a, 2).unwrap();
        assert_eq!(k, 0.0);
        assert!(m > 0.0 && m <= 1.0);
        let b = vec![vec![0.0, 0.0, 0.0, 0.0], vec![2.0, -1.0, 0.5, 0.5]];
        let (full, mass) = topk_kld(&a, &b, 4).unwrap();
        assert!(full >= 0.0);
        assert!((mass - 1.0).abs() < 1e-15);
        assert!(topk_kld(&a, &b, 5).is_err());
        assert!(topk_kld(&a, &b, 0).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert!((jaccard(&[1, 2], &[2, 3]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&[1], &[2]), 0.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
    }

    #[test]
    fn standard_error_formula() {
        let s = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(MeanSe::of(&[7.0]).stderr, 0.0);
    }

    fn model() -> Model {
        init_model(&ModelSpec { vocab_size: 24, d_model: 8, ffn_width: 12, n_heads: 2, seed: 1, ..ModelSpec::default() }, None)
            .unwrap()
    }

    #[test]
    fn oracle_row_has_unit_jaccard_and_dense_row_zero_kld() {
        let m = model();
        let docs = vec![vec![0, 5, 6, 7, 8, 9, 1, 2], vec![0, 3, 3, 4, 11, 12]];
        let opts = EvalOptions { top_k: 12, gen_len: None, tie_policy: TiePolicy::default() };
        let r = method_comparison(&m, &docs, 3, 6, 0.5, &[Method::Oracle, Method::Local], GlobalStats::default(), &opts)
            .unwrap();
        let o = r.get(EvalMethod::Sparse(Method::Oracle)).unwrap();
        assert!(o.jaccard.as_ref().unwrap().iter().all(|&j| j == 1.0));
        let d = r.get(EvalMethod::Dense).unwrap();
        assert!(d.kld_per_doc.iter().all(|&k| k == 0.0));
        assert!(d.ppl.mean >= 1.0);
        let csv = String::from_utf8(jaccard_radar_csv(&r).unwrap()).unwrap();
        assert!(csv.starts_with("method,layer_0,layer_1\n"));
        assert_eq!(sweep_rows(&r).len(), 3 * 3);
        assert!(method_comparison(&m, &docs, 6, 6, 0.5, &[Method::Local], GlobalStats::default(), &opts).is_err());
    }
}
