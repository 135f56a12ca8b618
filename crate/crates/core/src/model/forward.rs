use super::ffn::{down_project, gate_product, pre_activations};
use super::{Model, TokenId};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Edits FFN hidden activations in place before the down projection.
///
/// Used to zero pruned units, inject finite-difference perturbations and
/// apply scaled ablations without touching the weights.
pub trait HiddenHook {
    fn edit(&mut self, layer: usize, pos: usize, h: &mut [f64]);
}

pub struct NoHook;

impl HiddenHook for NoHook {
    fn edit(&mut self, _: usize, _: usize, _: &mut [f64]) {}
}

impl<F: FnMut(usize, usize, &mut [f64])> HiddenHook for F {
    fn edit(&mut self, layer: usize, pos: usize, h: &mut [f64]) {
        self(layer, pos, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// positions x m
    pub z_u: Matrix,
    pub z_g: Matrix,
    /// Hidden activations as consumed by the down projection (after any hook).
    pub h: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// positions x vocab
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn logit_rows(&self) -> Vec<Vec<f64>> {
        self.logits.to_rows()
    }
}

/// Split a document into teacher-forcing inputs and next-token targets.
pub fn next_token_targets(doc: &[TokenId]) -> (&[TokenId], Vec<Option<TokenId>>) {
    if doc.len() < 2 {
        return (&doc[..0], Vec::new());
    }
    (&doc[..doc.len() - 1], doc[1..].iter().map(|&t| Some(t)).collect())
}

pub(crate) fn rms_norm(x: &[f64], scale: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let ms = dot(x, x) / x.len() as f64;
    let rms = (ms + eps).sqrt();
    (x.iter().zip(scale).map(|(v, g)| v / rms * g).collect(), rms)
}

/// Per (layer, position) intermediates kept for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct PosCache {
    pub x_in: Vec<f64>,
    pub rms_attn: f64,
    pub q: Vec<f64>,
    /// per head, attention weights over positions 0..=pos
    pub probs: Vec<Vec<f64>>,
    pub x_mid: Vec<f64>,
    pub rms_ffn: f64,
    pub z_u: Vec<f64>,
    pub z_g: Vec<f64>,
    pub h: Vec<f64>,
}

/// Incremental causal decoder.
///
/// Feeding tokens one at a time produces exactly the logits of a full
/// forward pass, since every quantity at position `t` depends only on
/// positions `0..=t`.
pub struct Decoder<'m> {
    model: &'m Model,
    pub(crate) keys: Vec<Vec<Vec<f64>>>,
    pub(crate) values: Vec<Vec<Vec<f64>>>,
    record: bool,
    pub(crate) caches: Vec<Vec<PosCache>>,
    pub(crate) finals: Vec<(Vec<f64>, f64)>,
    pub(crate) logits: Vec<Vec<f64>>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self::build(model, false)
    }

    pub(crate) fn recording(model: &'m Model) -> Self {
        Self::build(model, true)
    }

    fn build(model: &'m Model, record: bool) -> Self {
        let n = model.spec.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            record,
            caches: vec![Vec::new(); n],
            finals: Vec::new(),
            logits: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        self.step_with(token, &mut NoHook)
    }

    /// Consume one token and return the next-token logits at its position.
    pub fn step_with(&mut self, token: TokenId, hook: &mut dyn HiddenHook) -> Result<Vec<f64>> {
        let model = self.model;
        let spec = &model.spec;
        if token >= spec.vocab_size {
            return Err(Error::validation(format!(
                "token id {token} out of range for vocab_size {}",
                spec.vocab_size
            )));
        }
        let pos = self.len();
        if pos >= spec.max_seq {
            return Err(Error::validation(format!(
                "sequence exceeds max_seq {}",
                spec.max_seq
            )));
        }
        let acts = model.activations();
        let (d, nh, dh) = (spec.d_model, spec.n_heads, spec.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut x = model.params.embed.row(token).to_vec();

        for (l, layer) in model.params.layers.iter().enumerate() {
            let x_in = x.clone();
            let (xn, rms_attn) = rms_norm(&x, &layer.attn_norm, spec.norm_eps);
            let q = layer.wq.vec_mul(&xn);
            self.keys[l].push(layer.wk.vec_mul(&xn));
            self.values[l].push(layer.wv.vec_mul(&xn));
            let (keys, values) = (&self.keys[l], &self.values[l]);

            let mut cat = vec![0.0; d];
            let mut probs_all = Vec::with_capacity(if self.record { nh } else { 0 });
            for hh in 0..nh {
                let r = hh * dh..(hh + 1) * dh;
                let scores: Vec<f64> =
                    keys.iter().map(|k| dot(&q[r.clone()], &k[r.clone()]) * inv_sqrt).collect();
                let probs = crate::linalg::softmax(&scores);
                for (u, &p) in probs.iter().enumerate() {
                    for (c, v) in cat[r.clone()].iter_mut().zip(&values[u][r.clone()]) {
                        *c += p * v;
                    }
                }
                if self.record {
                    probs_all.push(probs);
                }
            }
            let attn_out = layer.wo.vec_mul(&cat);
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }

            let x_mid = x.clone();
            let (fn_in, rms_ffn) = rms_norm(&x, &layer.ffn_norm, spec.norm_eps);
            let (z_u, z_g) = pre_activations(&fn_in, &layer.ffn);
            let mut h = gate_product(&z_u, &z_g, &acts);
            hook.edit(l, pos, &mut h);
            let y = down_project(&h, &layer.ffn);
            if !y.iter().chain(&h).all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    detail: format!("non-finite FFN value at position {pos}"),
                });
            }
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi += yi;
            }
            if self.record {
                self.caches[l].push(PosCache {
                    x_in,
                    rms_attn,
                    q,
                    probs: probs_all,
                    x_mid,
                    rms_ffn,
                    z_u,
                    z_g,
                    h,
                });
            }
        }

        let (xf, rms_final) = rms_norm(&x, &model.params.final_norm, spec.norm_eps);
        let logits = model.params.embed.mul_vec(&xf);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                layer: spec.n_layers.saturating_sub(1),
                detail: format!("non-finite logits at position {pos}"),
            });
        }
        if self.record {
            self.finals.push((x, rms_final));
            self.logits.push(logits.clone());
        }
        Ok(logits)
    }

    pub(crate) fn into_trace(self) -> ForwardTrace {
        let m = self.model.spec.ffn_width;
        let layers = self
            .caches
            .iter()
            .map(|rows| {
                let n = rows.len();
                let pack = |f: &dyn Fn(&PosCache) -> &Vec<f64>| {
                    Matrix::from_vec(n, m, rows.iter().flat_map(|c| f(c).iter().copied()).collect())
                        .expect("cache rows have ffn_width entries")
                };
                LayerTrace { z_u: pack(&|c| &c.z_u), z_g: pack(&|c| &c.z_g), h: pack(&|c| &c.h) }
            })
            .collect();
        let logits = Matrix::from_rows(self.logits).expect("logit rows share vocab size");
        ForwardTrace { layers, logits }
    }
}

pub(crate) fn run_recorded<'m>(
    model: &'m Model,
    tokens: &[TokenId],
    hook: &mut dyn HiddenHook,
) -> Result<Decoder<'m>> {
    model.check_tokens(tokens)?;
    if tokens.is_empty() {
        return Err(Error::validation("cannot run the model on an empty sequence"));
    }
    let mut dec = Decoder::recording(model);
    for &t in tokens {
        dec.step_with(t, hook)?;
    }
    Ok(dec)
}

/// Full causal forward pass recording FFN pre-activations, hidden
/// activations and logits at every position.
pub fn model_forward(tokens: &[TokenId], model: &Model) -> Result<ForwardTrace> {
    model_forward_with(tokens, model, &mut NoHook)
}

pub fn model_forward_with(
    tokens: &[TokenId],
    model: &Model,
    hook: &mut dyn HiddenHook,
) -> Result<ForwardTrace> {
    Ok(run_recorded(model, tokens, hook)?.into_trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ActivationKind, GateKind, ModelSpec};

    fn model() -> Model {
        let spec = ModelSpec { vocab_size: 11, d_model: 8, ffn_width: 12, n_layers: 3, n_heads: 2, max_seq: 16, seed: 21, ..ModelSpec::default() };
        init_model(&spec, None).unwrap()
    }

    #[test]
    fn prefix_logits_invariant_under_extension() {
        let m = model();
        let short = model_forward(&[1, 4, 2, 9], &m).unwrap();
        let long = model_forward(&[1, 4, 2, 9, 3, 3, 7], &m).unwrap();
        for t in 0..4 {
            assert_eq!(short.logits.row(t), long.logits.row(t));
        }
    }

    #[test]
    fn single_token_gives_one_finite_row() {
        let m = model();
        let tr = model_forward(&[5], &m).unwrap();
        assert_eq!(tr.logits.shape(), (1, 11));
        assert!(tr.logits.is_finite());
    }

    #[test]
    fn stored_hidden_matches_gate_product() {
        let mut m = model();
        m.spec.phi_u = ActivationKind::GeluTanh;
        m.spec.phi_g = GateKind::Sigmoid;
        let tr = model_forward(&[0, 3, 8, 1, 1], &m).unwrap();
        let acts = m.activations();
        for lt in &tr.layers {
            for t in 0..5 {
                for j in 0..12 {
                    let want = acts.phi_u.apply(lt.z_u.get(t, j)) * acts.phi_g.apply(lt.z_g.get(t, j));
                    assert_eq!(lt.h.get(t, j), want);
                }
            }
        }
    }

    #[test]
    fn incremental_steps_match_full_pass() {
        let m = model();
        let toks = [2, 7, 7, 0, 10, 4];
        let full = model_forward(&toks, &m).unwrap();
        let mut dec = Decoder::new(&m);
        for (t, &tok) in toks.iter().enumerate() {
            assert_eq!(dec.step(tok).unwrap(), full.logits.row(t));
        }
    }

    #[test]
    fn invalid_sequences_rejected() {
        let m = model();
        assert!(model_forward(&[11], &m).is_err());
        assert!(model_forward(&[1; 17], &m).is_err());
        assert!(model_forward(&[], &m).is_err());
    }

    #[test]
    fn hook_edits_reach_the_trace() {
        let m = model();
        let mut zero_unit_3 = |_l: usize, _t: usize, h: &mut [f64]| h[3] = 0.0;
        let tr = model_forward_with(&[1, 2, 3], &m, &mut zero_unit_3).unwrap();
        assert!(tr.layers.iter().all(|lt| (0..3).all(|t| lt.h.get(t, 3) == 0.0)));
    }
}
