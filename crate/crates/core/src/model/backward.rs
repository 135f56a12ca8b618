//! Exact reverse-mode gradients of the teacher-forced cross-entropy with
//! respect to every FFN hidden activation.

use super::forward::{run_recorded, Decoder, ForwardTrace, HiddenHook, NoHook};
use super::{Model, TokenId};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_softmax, softmax, Matrix};

/// `g[l]` is a positions x m matrix holding dL/dh at layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenGradTrace {
    pub loss: f64,
    pub layers: Vec<Matrix>,
}

/// Mean over targeted positions of `-log softmax(logits[t])[target[t]]`.
/// Positions whose target is `None` do not contribute.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<TokenId>]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::validation(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let v = logits.cols();
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        if y >= v {
            return Err(Error::validation(format!("target id {y} out of range for vocab {v}")));
        }
        total -= log_softmax(logits.row(t))[y];
        count += 1;
    }
    if count == 0 {
        return Err(Error::validation("cross-entropy needs at least one target"));
    }
    Ok(total / count as f64)
}

/// Loss after running the forward pass with `hook` editing hidden activations.
pub fn loss_with_hook(
    model: &Model,
    tokens: &[TokenId],
    targets: &[Option<TokenId>],
    hook: &mut dyn HiddenHook,
) -> Result<f64> {
    let dec = run_recorded(model, tokens, hook)?;
    let logits = Matrix::from_rows(dec.logits).expect("uniform logit rows");
    cross_entropy(&logits, targets)
}

fn rms_norm_backward(x: &[f64], rms: f64, scale: &[f64], dy: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(scale).map(|(a, g)| a * g).collect();
    let xhat: Vec<f64> = x.iter().map(|v| v / rms).collect();
    let proj = dot(&dxhat, &xhat) / n;
    dxhat.iter().zip(&xhat).map(|(a, b)| (a - b * proj) / rms).collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Forward pass plus reverse sweep; returns the trace and dL/dh.
pub fn forward_backward(
    model: &Model,
    tokens: &[TokenId],
    targets: &[Option<TokenId>],
) -> Result<(ForwardTrace, HiddenGradTrace)> {
    if targets.len() != tokens.len() {
        return Err(Error::validation(format!(
            "{} targets for {} tokens",
            targets.len(),
            tokens.len()
        )));
    }
    let dec = run_recorded(model, tokens, &mut NoHook)?;
    let grads = reverse(&dec, targets)?;
    Ok((dec.into_trace(), grads))
}

/// Exact dL/dh for every (layer, position, unit), where L is the mean
/// cross-entropy over targeted positions.
pub fn backward_hidden_grads(
    model: &Model,
    tokens: &[TokenId],
    targets: &[Option<TokenId>],
) -> Result<HiddenGradTrace> {
    Ok(forward_backward(model, tokens, targets)?.1)
}

fn reverse(dec: &Decoder<'_>, targets: &[Option<TokenId>]) -> Result<HiddenGradTrace> {
    let model = dec.model();
    let spec = &model.spec;
    let params = &model.params;
    let n = dec.logits.len();
    let (d, m, nh, dh) = (spec.d_model, spec.ffn_width, spec.n_heads, spec.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let acts = model.activations();

    let logits = Matrix::from_rows(dec.logits.clone()).expect("uniform logit rows");
    let loss = cross_entropy(&logits, targets)?;
    let count = targets.iter().filter(|t| t.is_some()).count() as f64;

    let mut dx: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let (x, rms) = &dec.finals[t];
            match targets[t] {
                None => vec![0.0; d],
                Some(y) => {
                    let mut dl = softmax(&dec.logits[t]);
                    dl[y] -= 1.0;
                    for v in dl.iter_mut() {
                        *v /= count;
                    }
                    let dxf = params.embed.vec_mul(&dl);
                    rms_norm_backward(x, *rms, &params.final_norm, &dxf)
                }
            }
        })
        .collect();

    let mut grads = vec![Matrix::zeros(n, m); spec.n_layers];
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let caches = &dec.caches[l];
        let ffn = &layer.ffn;
        let mut dx_mid = Vec::with_capacity(n);
        for t in 0..n {
            let c = &caches[t];
            let g = ffn.w_down.mul_vec(&dx[t]);
            let mut dz_u = vec![0.0; m];
            let mut dz_g = vec![0.0; m];
            for j in 0..m {
                let (zu, zg) = (c.z_u[j], c.z_g[j]);
                dz_u[j] = g[j] * acts.phi_g.apply(zg) * acts.phi_u.derivative(zu);
                dz_g[j] = g[j] * acts.phi_u.apply(zu) * acts.phi_g.derivative(zg);
            }
            grads[l].row_mut(t).copy_from_slice(&g);
            let mut dfn = ffn.w_up.mul_vec(&dz_u);
            add_into(&mut dfn, &ffn.w_gate.mul_vec(&dz_g));
            let mut dm = dx[t].clone();
            add_into(&mut dm, &rms_norm_backward(&c.x_mid, c.rms_ffn, &layer.ffn_norm, &dfn));
            dx_mid.push(dm);
        }

        let keys = &dec.keys[l];
        let values = &dec.values[l];
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for t in 0..n {
            let c = &caches[t];
            let dcat = layer.wo.mul_vec(&dx_mid[t]);
            for hh in 0..nh {
                let r = hh * dh..(hh + 1) * dh;
                let probs = &c.probs[hh];
                let dout = &dcat[r.clone()];
                let da: Vec<f64> = (0..=t).map(|u| dot(dout, &values[u][r.clone()])).collect();
                let mean = dot(probs, &da);
                for u in 0..=t {
                    let p = probs[u];
                    for (dvi, o) in dv[u][r.clone()].iter_mut().zip(dout) {
                        *dvi += p * o;
                    }
                    let ds = p * (da[u] - mean) * inv_sqrt;
                    for ((dqi, dki), (ki, qi)) in dq[t][r.clone()]
                        .iter_mut()
                        .zip(dk[u][r.clone()].iter_mut())
                        .zip(keys[u][r.clone()].iter().zip(&c.q[r.clone()]))
                    {
                        *dqi += ds * ki;
                        *dki += ds * qi;
                    }
                }
            }
        }
        for t in 0..n {
            let c = &caches[t];
            let mut dxn = layer.wq.mul_vec(&dq[t]);
            add_into(&mut dxn, &layer.wk.mul_vec(&dk[t]));
            add_into(&mut dxn, &layer.wv.mul_vec(&dv[t]));
            let mut di = dx_mid[t].clone();
            add_into(&mut di, &rms_norm_backward(&c.x_in, c.rms_attn, &layer.attn_norm, &dxn));
            dx[t] = di;
        }
        if !grads[l].is_finite() {
            return Err(Error::Numeric { layer: l, detail: "non-finite hidden gradient".into() });
        }
    }
    Ok(HiddenGradTrace { loss, layers: grads })
}
