//! Desk-scale decoder-only transformer with gated FFN blocks.
//!
//! The stack is pre-RMSNorm with a single residual stream, multi-head causal
//! attention without positional encoding, and an output head tied to the
//! token embeddings. All arithmetic is `f64`.

mod backward;
pub(crate) mod ffn;
mod forward;
mod sampling;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::keyed_rng;

pub use backward::{
    backward_hidden_grads, cross_entropy, forward_backward, loss_with_hook, HiddenGradTrace,
};
pub use ffn::{ffn_forward, unit_contribution, FfnOutput};
pub use forward::{
    model_forward, model_forward_with, next_token_targets, Decoder, ForwardTrace, HiddenHook,
    LayerTrace, NoHook,
};
pub use sampling::{greedy_generate, sample_next, Sample, SamplingPolicy, HARD_EXCLUSION};

pub type TokenId = usize;

/// Reserved beginning-of-sequence id.
pub const BOS: TokenId = 0;

/// Default multiplier applied to planted units' up/gate columns.
pub const DEFAULT_PLANTED_SCALE: f64 = 4.0;

/// phi_u, the activation applied to the up projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Relu,
    Silu,
    GeluTanh,
}

/// phi_g, the gating function applied to the gate projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Silu,
    Sigmoid,
    Identity,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl ActivationKind {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Identity => z,
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::Silu => silu(z),
            ActivationKind::GeluTanh => {
                0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
            }
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Identity => 1.0,
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Silu => silu_grad(z),
            ActivationKind::GeluTanh => {
                let u = GELU_C * (z + 0.044715 * z * z * z);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
            }
        }
    }
}

impl GateKind {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            GateKind::Silu => silu(z),
            GateKind::Sigmoid => sigmoid(z),
            GateKind::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            GateKind::Silu => silu_grad(z),
            GateKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            GateKind::Identity => 1.0,
        }
    }
}

/// The pair (phi_u, phi_g) used by every FFN block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Activations {
    pub phi_u: ActivationKind,
    pub phi_g: GateKind,
}

impl Default for Activations {
    fn default() -> Self {
        Self { phi_u: ActivationKind::Identity, phi_g: GateKind::Silu }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub phi_u: ActivationKind,
    pub phi_g: GateKind,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 16,
            ffn_width: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq: 256,
            phi_u: ActivationKind::Identity,
            phi_g: GateKind::Silu,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("ffn_width", self.ffn_width),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::validation("norm_eps must be a positive finite real"));
        }
        Ok(())
    }

    pub fn activations(&self) -> Activations {
        Activations { phi_u: self.phi_u, phi_g: self.phi_g }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one gated FFN block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfnParams {
    /// d x m
    pub w_up: Matrix,
    /// d x m
    pub w_gate: Matrix,
    /// m x d
    pub w_down: Matrix,
    pub b_up: Vec<f64>,
    pub b_gate: Vec<f64>,
    pub b_down: Vec<f64>,
}

impl FfnParams {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            w_up: Matrix::zeros(d, m),
            w_gate: Matrix::zeros(d, m),
            w_down: Matrix::zeros(m, d),
            b_up: vec![0.0; m],
            b_gate: vec![0.0; m],
            b_down: vec![0.0; d],
        }
    }

    pub fn width(&self) -> usize {
        self.w_up.cols()
    }

    pub fn d_model(&self) -> usize {
        self.w_up.rows()
    }

    fn check(&self, d: usize, m: usize, layer: usize) -> Result<()> {
        let shapes = [
            ("w_up", self.w_up.shape(), (d, m)),
            ("w_gate", self.w_gate.shape(), (d, m)),
            ("w_down", self.w_down.shape(), (m, d)),
            ("b_up", (1, self.b_up.len()), (1, m)),
            ("b_gate", (1, self.b_gate.len()), (1, m)),
            ("b_down", (1, self.b_down.len()), (1, d)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::validation(format!(
                    "layer {layer} {name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        let finite = self.w_up.is_finite()
            && self.w_gate.is_finite()
            && self.w_down.is_finite()
            && self.b_up.iter().chain(&self.b_gate).chain(&self.b_down).all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation(format!("layer {layer} FFN has non-finite weights")));
        }
        Ok(())
    }

    /// Parameters owned by the FFN block: `m(2d + d) + 2m + d`.
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.d_model(), self.width());
        m * (2 * d + d) + 2 * m + d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// vocab x d, shared with the output head.
    pub embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
}

/// Units per layer whose up/gate columns are inflated at init, giving a
/// known ground-truth "critical set".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    /// `layers[l]` lists the planted unit indices of layer `l`; missing
    /// trailing layers have none.
    pub layers: Vec<Vec<usize>>,
    pub scale: f64,
}

impl PlantedSpec {
    pub fn new(layers: Vec<Vec<usize>>) -> Self {
        Self { layers, scale: DEFAULT_PLANTED_SCALE }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() > spec.n_layers {
            return Err(Error::validation(format!(
                "planted spec names {} layers but the model has {}",
                self.layers.len(),
                spec.n_layers
            )));
        }
        for (l, units) in self.layers.iter().enumerate() {
            if let Some(&j) = units.iter().find(|&&j| j >= spec.ffn_width) {
                return Err(Error::validation(format!(
                    "planted unit {j} in layer {l} is outside [0, {})",
                    spec.ffn_width
                )));
            }
        }
        if !self.scale.is_finite() {
            return Err(Error::validation("planted scale must be finite"));
        }
        Ok(())
    }

    pub fn units(&self, layer: usize) -> &[usize] {
        self.layers.get(layer).map_or(&[], Vec::as_slice)
    }
}

/// A model: its configuration plus weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

fn normal_matrix(seed: u64, path: &str, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let mut rng = keyed_rng(seed, path);
    let std = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

/// Build a model deterministically from `spec.seed`.
///
/// Every matrix is drawn from `N(0, 1/fan_in)` using a stream keyed by its
/// parameter path (`embed`, `layers.{l}.attn.wq`, `layers.{l}.ffn.w_up`, ...).
/// The embedding uses `fan_in = d_model`. Biases start at zero and norm
/// scales at one. Planted units get their `w_up` and `w_gate` columns
/// multiplied by `planted.scale`.
pub fn init_model(spec: &ModelSpec, planted: Option<&PlantedSpec>) -> Result<Model> {
    spec.validate()?;
    if let Some(p) = planted {
        p.validate(spec)?;
    }
    let (v, d, m, seed) = (spec.vocab_size, spec.d_model, spec.ffn_width, spec.seed);
    let embed = normal_matrix(seed, "embed", v, d, d);
    let layers = (0..spec.n_layers)
        .map(|l| {
            let p = |name: &str| format!("layers.{l}.{name}");
            let mut ffn = FfnParams {
                w_up: normal_matrix(seed, &p("ffn.w_up"), d, m, d),
                w_gate: normal_matrix(seed, &p("ffn.w_gate"), d, m, d),
                w_down: normal_matrix(seed, &p("ffn.w_down"), m, d, m),
                b_up: vec![0.0; m],
                b_gate: vec![0.0; m],
                b_down: vec![0.0; d],
            };
            if let Some(planted) = planted {
                for &j in planted.units(l) {
                    ffn.w_up.scale_col(j, planted.scale);
                    ffn.w_gate.scale_col(j, planted.scale);
                }
            }
            LayerParams {
                attn_norm: vec![1.0; d],
                wq: normal_matrix(seed, &p("attn.wq"), d, d, d),
                wk: normal_matrix(seed, &p("attn.wk"), d, d, d),
                wv: normal_matrix(seed, &p("attn.wv"), d, d, d),
                wo: normal_matrix(seed, &p("attn.wo"), d, d, d),
                ffn_norm: vec![1.0; d],
                ffn,
            }
        })
        .collect();
    Ok(Model { spec: spec.clone(), params: ModelParams { embed, layers, final_norm: vec![1.0; d] } })
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        let spec = &self.spec;
        spec.validate()?;
        let (v, d, m) = (spec.vocab_size, spec.d_model, spec.ffn_width);
        let p = &self.params;
        if p.embed.shape() != (v, d) {
            return Err(Error::validation(format!(
                "embedding has shape {:?}, expected {:?}",
                p.embed.shape(),
                (v, d)
            )));
        }
        if !p.embed.is_finite() {
            return Err(Error::validation("embedding has non-finite entries"));
        }
        if p.layers.len() != spec.n_layers {
            return Err(Error::validation(format!(
                "model has {} layers, spec says {}",
                p.layers.len(),
                spec.n_layers
            )));
        }
        if p.final_norm.len() != d || !p.final_norm.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("final_norm must have d_model finite entries"));
        }
        for (l, layer) in p.layers.iter().enumerate() {
            for (name, w) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv), ("wo", &layer.wo)] {
                if w.shape() != (d, d) || !w.is_finite() {
                    return Err(Error::validation(format!(
                        "layer {l} {name} must be a finite {d}x{d} matrix"
                    )));
                }
            }
            for (name, s) in [("attn_norm", &layer.attn_norm), ("ffn_norm", &layer.ffn_norm)] {
                if s.len() != d || !s.iter().all(|x| x.is_finite()) {
                    return Err(Error::validation(format!(
                        "layer {l} {name} must have d_model finite entries"
                    )));
                }
            }
            layer.ffn.check(d, m, l)?;
        }
        Ok(())
    }

    pub fn activations(&self) -> Activations {
        self.spec.activations()
    }

    pub fn n_layers(&self) -> usize {
        self.spec.n_layers
    }

    pub fn ffn_width(&self) -> usize {
        self.spec.ffn_width
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    /// Check that a token sequence can be fed to this model.
    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.spec.max_seq {
            return Err(Error::validation(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.spec.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.spec.vocab_size) {
            return Err(Error::validation(format!(
                "token id {t} out of range for vocab_size {}",
                self.spec.vocab_size
            )));
        }
        Ok(())
    }
}
