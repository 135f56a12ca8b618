//! Per-layer neuron masks, masked execution and physical compression.

use serde::{Deserialize, Serialize};

use crate::aggregation::{check_lambda, glass_score, rank_scores, select_top_k, TiePolicy};
use crate::error::{Error, Result};
use crate::importance::{ImportanceStats, StatsKind};
use crate::model::ffn::{down_project, gate_product, pre_activations};
use crate::model::{model_forward_with, Activations, FfnParams, ForwardTrace, HiddenHook, Model, TokenId};
use crate::storage::model_hash;

/// How a mask's retained set was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Prompt activations only (λ = 1).
    Local,
    /// Corpus activation magnitude only (λ = 0).
    GlobalActivation,
    /// Corpus impact only (λ = 0).
    GlobalImpact,
    /// Weighted Borda fusion of local ranks with global activation ranks.
    AGlass,
    /// Weighted Borda fusion of local ranks with global impact ranks.
    IGlass,
    /// Local activations of the full document, prompt and continuation.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Local,
        Method::GlobalActivation,
        Method::GlobalImpact,
        Method::AGlass,
        Method::IGlass,
        Method::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::GlobalActivation => "global_activation",
            Method::GlobalImpact => "global_impact",
            Method::AGlass => "a_glass",
            Method::IGlass => "i_glass",
            Method::Oracle => "oracle",
        }
    }

    pub fn needs_local(self) -> bool {
        !matches!(self, Method::GlobalActivation | Method::GlobalImpact)
    }

    /// Kind of global statistic the method consumes, if any.
    pub fn global_kind(self) -> Option<StatsKind> {
        match self {
            Method::GlobalActivation | Method::AGlass => Some(StatsKind::GlobalActivation),
            Method::GlobalImpact | Method::IGlass => Some(StatsKind::GlobalImpact),
            Method::Local | Method::Oracle => None,
        }
    }

    /// The λ actually applied: fixed at the endpoints for single-source
    /// methods.
    pub fn effective_lambda(self, lambda: f64) -> f64 {
        match self {
            Method::Local | Method::Oracle => 1.0,
            Method::GlobalActivation | Method::GlobalImpact => 0.0,
            Method::AGlass | Method::IGlass => lambda,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = match s.replace('-', "_").as_str() {
            "global" | "global_act" => "global_activation".to_string(),
            other => other.to_string(),
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::validation(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronMask {
    pub method: Method,
    pub lambda: f64,
    pub k: usize,
    /// FFN width of the model the mask was built for.
    pub width: usize,
    pub tie_policy: TiePolicy,
    pub model_hash: String,
    pub stats_hashes: Vec<String>,
    /// Retained unit indices per layer, strictly increasing.
    pub layers: Vec<Vec<usize>>,
}

impl NeuronMask {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.k == 0 || self.k > self.width {
            return Err(Error::validation(format!("mask k = {} outside [1, {}]", self.k, self.width)));
        }
        if self.layers.is_empty() {
            return Err(Error::validation("mask has no layers"));
        }
        for (l, idx) in self.layers.iter().enumerate() {
            if idx.len() != self.k {
                return Err(Error::validation(format!("mask layer {l} keeps {} units, k = {}", idx.len(), self.k)));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation(format!("mask layer {l} indices are not strictly increasing")));
            }
            if idx.last().is_some_and(|&j| j >= self.width) {
                return Err(Error::validation(format!("mask layer {l} index out of range")));
            }
        }
        Ok(())
    }

    /// Check that the mask was built for `model`, whose hash is `hash`.
    pub fn check_against(&self, model: &Model, hash: &str) -> Result<()> {
        if self.model_hash != hash {
            return Err(Error::provenance(format!(
                "mask was built for model {}, not {}",
                self.model_hash, hash
            )));
        }
        if self.layers.len() != model.n_layers() || self.width != model.ffn_width() {
            return Err(Error::validation("mask shape does not match the model"));
        }
        Ok(())
    }

    /// Per-unit keep flags for one layer.
    pub fn keep_flags(&self, layer: usize) -> Vec<bool> {
        let mut keep = vec![false; self.width];
        for &j in &self.layers[layer] {
            keep[j] = true;
        }
        keep
    }
}

/// Retained sets per layer from raw score vectors.
///
/// `local[l]` and `global[l]` are score vectors for layer `l`. A missing
/// side is replaced by the other one, which only matters for ties since the
/// effective λ then puts all weight on the side that is present.
pub fn select_layers(
    local: Option<&[Vec<f64>]>,
    global: Option<&[Vec<f64>]>,
    k: usize,
    lambda: f64,
    tie_policy: TiePolicy,
) -> Result<Vec<Vec<usize>>> {
    check_lambda(lambda)?;
    let (local, global) = match (local, global) {
        (Some(l), Some(g)) => (l, g),
        (Some(l), None) => (l, l),
        (None, Some(g)) => (g, g),
        (None, None) => return Err(Error::validation("no statistics to select from")),
    };
    if local.len() != global.len() {
        return Err(Error::validation("local and global stats differ in layer count"));
    }
    local
        .iter()
        .zip(global)
        .map(|(l, g)| {
            let rl = rank_scores(l, tie_policy)?;
            let rg = rank_scores(g, tie_policy)?;
            select_top_k(&glass_score(&rl, &rg, lambda)?, k, tie_policy)
        })
        .collect()
}

fn require_kind(stats: &ImportanceStats, want: StatsKind, role: &str) -> Result<()> {
    if stats.kind != want {
        return Err(Error::provenance(format!(
            "{role} statistics have kind {:?}, method needs {:?}",
            stats.kind, want
        )));
    }
    Ok(())
}

/// Build a mask for `model` under `method`.
///
/// Local methods need `local` stats of kind `local_activation`; global and
/// fused methods need `global` stats of the matching kind. Stats computed for
/// a different model are rejected with a provenance error.
pub fn build_masks(
    model: &Model,
    method: Method,
    local: Option<&ImportanceStats>,
    global: Option<&ImportanceStats>,
    k: usize,
    lambda: f64,
    tie_policy: TiePolicy,
) -> Result<NeuronMask> {
    let hash = model_hash(model)?;
    let local = if method.needs_local() {
        let s = local.ok_or_else(|| Error::validation(format!("method {} needs local stats", method.name())))?;
        require_kind(s, StatsKind::LocalActivation, "local")?;
        s.check_against(model, &hash)?;
        Some(s)
    } else {
        None
    };
    let global = match method.global_kind() {
        Some(kind) => {
            let s = global
                .ok_or_else(|| Error::validation(format!("method {} needs global stats", method.name())))?;
            require_kind(s, kind, "global")?;
            s.check_against(model, &hash)?;
            Some(s)
        }
        None => None,
    };
    let m = model.ffn_width();
    if k == 0 || k > m {
        return Err(Error::validation(format!("k must lie in [1, {m}], got {k}")));
    }
    check_lambda(lambda)?;
    let eff = method.effective_lambda(lambda);
    let layers = select_layers(
        local.map(|s| s.layers.as_slice()),
        global.map(|s| s.layers.as_slice()),
        k,
        eff,
        tie_policy,
    )?;
    let mut stats_hashes = Vec::new();
    for s in local.iter().chain(global.iter()) {
        use crate::storage::Artifact;
        stats_hashes.push(s.content_hash()?);
    }
    let mask = NeuronMask { method, lambda: eff, k, width: m, tie_policy, model_hash: hash, stats_hashes, layers };
    mask.validate()?;
    Ok(mask)
}

/// Gated FFN with every unit outside `keep` forced to zero before the down
/// projection. `b_down` is kept.
pub fn masked_ffn_forward(x: &[f64], ffn: &FfnParams, acts: &Activations, keep: &[usize]) -> Result<Vec<f64>> {
    let m = ffn.width();
    if x.len() != ffn.d_model() {
        return Err(Error::validation("FFN input has the wrong length"));
    }
    let mut flags = vec![false; m];
    for &j in keep {
        if j >= m {
            return Err(Error::validation(format!("mask index {j} out of range [0, {m})")));
        }
        flags[j] = true;
    }
    let (z_u, z_g) = pre_activations(x, ffn);
    let mut h = gate_product(&z_u, &z_g, acts);
    for (v, &f) in h.iter_mut().zip(&flags) {
        if !f {
            *v = 0.0;
        }
    }
    let y = down_project(&h, ffn);
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric { layer: 0, detail: "non-finite masked FFN output".into() });
    }
    Ok(y)
}

/// Hook that zeroes every pruned unit; the mask itself is never modified.
pub struct MaskHook {
    keep: Vec<Vec<bool>>,
}

impl MaskHook {
    pub fn new(mask: &NeuronMask) -> Self {
        MaskHook { keep: (0..mask.layers.len()).map(|l| mask.keep_flags(l)).collect() }
    }

    pub fn from_layers(layers: &[Vec<usize>], width: usize) -> Self {
        let keep = layers
            .iter()
            .map(|idx| {
                let mut k = vec![false; width];
                for &j in idx {
                    k[j] = true;
                }
                k
            })
            .collect();
        MaskHook { keep }
    }
}

impl HiddenHook for MaskHook {
    fn edit(&mut self, layer: usize, _pos: usize, h: &mut [f64]) {
        for (v, &k) in h.iter_mut().zip(&self.keep[layer]) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

/// Full-stack forward pass with the mask applied in every FFN.
pub fn masked_model_forward(tokens: &[TokenId], model: &Model, mask: &NeuronMask) -> Result<ForwardTrace> {
    if mask.layers.len() != model.n_layers() || mask.width != model.ffn_width() {
        return Err(Error::validation("mask shape does not match the model"));
    }
    model_forward_with(tokens, model, &mut MaskHook::new(mask))
}

/// Slice every FFN down to the retained units, keeping their original order.
pub fn compress_layers(model: &Model, layers: &[Vec<usize>]) -> Result<Model> {
    let k = layers.first().map_or(0, Vec::len);
    if layers.len() != model.n_layers() || layers.iter().any(|l| l.len() != k) || k == 0 {
        return Err(Error::validation("compression needs one non-empty, equal-size index list per layer"));
    }
    let mut out = model.clone();
    for (layer, idx) in out.params.layers.iter_mut().zip(layers) {
        if idx.iter().any(|&j| j >= model.ffn_width()) {
            return Err(Error::validation("compression index out of range"));
        }
        let f = &layer.ffn;
        layer.ffn = FfnParams {
            w_up: f.w_up.select_cols(idx),
            w_gate: f.w_gate.select_cols(idx),
            w_down: f.w_down.select_rows(idx),
            b_up: idx.iter().map(|&j| f.b_up[j]).collect(),
            b_gate: idx.iter().map(|&j| f.b_gate[j]).collect(),
            b_down: f.b_down.clone(),
        };
    }
    out.spec.ffn_width = k;
    out.validate()?;
    Ok(out)
}

/// Physically remove pruned units. The mask must have been built for `model`.
pub fn compress(model: &Model, mask: &NeuronMask) -> Result<Model> {
    mask.validate()?;
    mask.check_against(model, &model_hash(model)?)?;
    compress_layers(model, &mask.layers)
}
