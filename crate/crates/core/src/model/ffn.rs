use super::{Activations, FfnParams};
use crate::error::{Error, Result};

/// Everything the gated FFN computes for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnOutput {
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub z_u: Vec<f64>,
    pub z_g: Vec<f64>,
}

pub(crate) fn pre_activations(x: &[f64], ffn: &FfnParams) -> (Vec<f64>, Vec<f64>) {
    let mut z_u = ffn.w_up.vec_mul(x);
    let mut z_g = ffn.w_gate.vec_mul(x);
    for (z, b) in z_u.iter_mut().zip(&ffn.b_up) {
        *z += b;
    }
    for (z, b) in z_g.iter_mut().zip(&ffn.b_gate) {
        *z += b;
    }
    (z_u, z_g)
}

pub(crate) fn gate_product(z_u: &[f64], z_g: &[f64], acts: &Activations) -> Vec<f64> {
    z_u.iter().zip(z_g).map(|(&u, &g)| acts.phi_u.apply(u) * acts.phi_g.apply(g)).collect()
}

/// `y = h W_down + b_down`, accumulating units in ascending index order and
/// adding the bias last.
pub(crate) fn down_project(h: &[f64], ffn: &FfnParams) -> Vec<f64> {
    let mut y = ffn.w_down.vec_mul(h);
    for (v, b) in y.iter_mut().zip(&ffn.b_down) {
        *v += b;
    }
    y
}

/// Gated FFN: `h = phi_u(x W_up + b_up) * phi_g(x W_gate + b_gate)`,
/// `y = h W_down + b_down`.
pub fn ffn_forward(x: &[f64], ffn: &FfnParams, acts: &Activations) -> Result<FfnOutput> {
    if x.len() != ffn.d_model() {
        return Err(Error::validation(format!(
            "FFN input has length {}, expected {}",
            x.len(),
            ffn.d_model()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric { layer: 0, detail: "non-finite FFN input".into() });
    }
    let (z_u, z_g) = pre_activations(x, ffn);
    let h = gate_product(&z_u, &z_g, acts);
    let y = down_project(&h, ffn);
    if !y.iter().chain(&h).all(|v| v.is_finite()) {
        return Err(Error::Numeric { layer: 0, detail: "non-finite FFN activation".into() });
    }
    Ok(FfnOutput { y, h, z_u, z_g })
}

/// Contribution of unit `j` to the FFN output, with `b_down` added once:
/// `phi_u(z_u[j]) * phi_g(z_g[j]) * W_down[j, :] + b_down`.
///
/// Summing `unit_contribution(x, j) - b_down` over all `j` and adding
/// `b_down` back reproduces `ffn_forward(x).y`.
pub fn unit_contribution(x: &[f64], ffn: &FfnParams, acts: &Activations, j: usize) -> Result<Vec<f64>> {
    let m = ffn.width();
    if j >= m {
        return Err(Error::validation(format!("unit index {j} out of range [0, {m})")));
    }
    if x.len() != ffn.d_model() {
        return Err(Error::validation(format!(
            "FFN input has length {}, expected {}",
            x.len(),
            ffn.d_model()
        )));
    }
    let mut zu = ffn.b_up[j];
    let mut zg = ffn.b_gate[j];
    for (i, &xi) in x.iter().enumerate() {
        zu += xi * ffn.w_up.get(i, j);
        zg += xi * ffn.w_gate.get(i, j);
    }
    let hj = acts.phi_u.apply(zu) * acts.phi_g.apply(zg);
    Ok(ffn.w_down.row(j).iter().zip(&ffn.b_down).map(|(&w, &b)| hj * w + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{ActivationKind, GateKind};
    use crate::rng::keyed_rng;
    use rand::Rng;

    fn random_ffn(seed: u64, d: usize, m: usize) -> FfnParams {
        let mut rng = keyed_rng(seed, "test.ffn");
        let mut mat = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (w_up, w_gate, w_down) = (mat(d, m), mat(d, m), mat(m, d));
        let mut rng = keyed_rng(seed, "test.bias");
        let mut vec = |n| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
        FfnParams { w_up, w_gate, w_down, b_up: vec(m), b_gate: vec(m), b_down: vec(d) }
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut ffn = FfnParams::zeros(3, 5);
        ffn.b_down = vec![0.5, -1.0, 2.0];
        let out = ffn_forward(&[1.0, -7.0, 3.0], &ffn, &Activations::default()).unwrap();
        assert_eq!(out.y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn identity_activations_reduce_to_bilinear_form() {
        let mut ffn = random_ffn(1, 4, 6);
        ffn.b_up = vec![0.0; 6];
        ffn.b_gate = vec![0.0; 6];
        ffn.b_down = vec![0.0; 4];
        let acts = Activations { phi_u: ActivationKind::Identity, phi_g: GateKind::Identity };
        let x = [0.3, -1.2, 0.8, 0.05];
        let out = ffn_forward(&x, &ffn, &acts).unwrap();
        let up = ffn.w_up.vec_mul(&x);
        let gate = ffn.w_gate.vec_mul(&x);
        let h: Vec<f64> = up.iter().zip(&gate).map(|(a, b)| a * b).collect();
        assert_eq!(out.y, ffn.w_down.vec_mul(&h));
    }

    #[test]
    fn decomposition_over_units_recovers_output() {
        let acts = Activations::default();
        for seed in 0..10 {
            let ffn = random_ffn(seed, 5, 9);
            let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
            let y = ffn_forward(&x, &ffn, &acts).unwrap().y;
            let mut acc = ffn.b_down.clone();
            for j in 0..9 {
                let c = unit_contribution(&x, &ffn, &acts, j).unwrap();
                for k in 0..5 {
                    acc[k] += c[k] - ffn.b_down[k];
                }
            }
            for k in 0..5 {
                assert!((acc[k] - y[k]).abs() <= 1e-10 * (1.0 + y[k].abs()));
            }
        }
    }

    #[test]
    fn single_unit_layer_matches_contribution() {
        let acts = Activations::default();
        let mut ffn = random_ffn(5, 4, 6);
        for j in 0..6 {
            if j != 2 {
                ffn.w_down.row_mut(j).fill(0.0);
            }
        }
        let x = [0.9, -0.1, 0.4, -0.6];
        let y = ffn_forward(&x, &ffn, &acts).unwrap().y;
        let c = unit_contribution(&x, &ffn, &acts, 2).unwrap();
        for k in 0..4 {
            assert!(((y[k] - ffn.b_down[k]) - (c[k] - ffn.b_down[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn contribution_matches_scalar_triple_product() {
        let acts = Activations { phi_u: ActivationKind::GeluTanh, phi_g: GateKind::Sigmoid };
        let ffn = random_ffn(9, 3, 4);
        let x = [0.2, 0.7, -0.4];
        // hand expansion for j = 0
        let zu = ffn.b_up[0] + 0.2 * ffn.w_up.get(0, 0) + 0.7 * ffn.w_up.get(1, 0) - 0.4 * ffn.w_up.get(2, 0);
        let zg = ffn.b_gate[0] + 0.2 * ffn.w_gate.get(0, 0) + 0.7 * ffn.w_gate.get(1, 0) - 0.4 * ffn.w_gate.get(2, 0);
        let gelu = 0.5 * zu * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (zu + 0.044715 * zu.powi(3))).tanh());
        let sig = 1.0 / (1.0 + (-zg).exp());
        let c = unit_contribution(&x, &ffn, &acts, 0).unwrap();
        for k in 0..3 {
            let want = gelu * sig * ffn.w_down.get(0, k) + ffn.b_down[k];
            assert!((c[k] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_down_row_gives_bias() {
        let mut ffn = random_ffn(2, 3, 4);
        ffn.w_down.row_mut(1).fill(0.0);
        let c = unit_contribution(&[1.0, 2.0, 3.0], &ffn, &Activations::default(), 1).unwrap();
        assert_eq!(c, ffn.b_down);
    }

    #[test]
    fn out_of_range_unit_rejected() {
        let ffn = FfnParams::zeros(2, 3);
        assert!(unit_contribution(&[0.0, 0.0], &ffn, &Activations::default(), 3).is_err());
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let ffn = FfnParams::zeros(2, 3);
        let err = ffn_forward(&[f64::NAN, 0.0], &ffn, &Activations::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
