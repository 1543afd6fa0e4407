use serde::{Deserialize, Serialize};

use super::layers::LayerParams;
use crate::error::{Error, Result};

/// Hyperparameters of one Adam parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to weight-matrix gradients (biases excluded).
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<LayerParams>,
    pub second_moment: Vec<LayerParams>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[LayerParams]) -> Self {
        AdamState {
            config,
            first_moment: params.iter().map(LayerParams::zeros_like).collect(),
            second_moment: params.iter().map(LayerParams::zeros_like).collect(),
            step_count: 0,
        }
    }
}

fn check_finite(group: &str, grads: &[LayerParams]) -> Result<()> {
    for (l, g) in grads.iter().enumerate() {
        for (k, w) in g.weights.iter().enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {group}.{l}.w{k}")));
            }
        }
        if g.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {group}.{l}.bias")));
        }
    }
    Ok(())
}

fn update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, decay: f64, c1: f64, c2: f64) {
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One bias-corrected Adam update of a parameter group. Gradients are checked
/// for finiteness before anything is modified.
pub fn adam_step(group: &str, params: &mut [LayerParams], grads: &[LayerParams], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!("{group}: parameter/gradient/state layer counts differ")));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.weights.len() != g.weights.len()
            || p.weights.iter().zip(&g.weights).any(|(a, b)| a.dim() != b.dim())
            || p.bias.len() != g.bias.len()
        {
            return Err(Error::Shape(format!("{group}: gradient shapes do not match parameters")));
        }
    }
    check_finite(group, grads)?;
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((pw, gw), mw), vw) in p.weights.iter_mut().zip(&g.weights).zip(m.weights.iter_mut()).zip(v.weights.iter_mut()) {
            update(
                pw.as_slice_mut().expect("standard layout"),
                gw.as_slice().expect("standard layout"),
                mw.as_slice_mut().expect("standard layout"),
                vw.as_slice_mut().expect("standard layout"),
                &cfg,
                cfg.weight_decay,
                c1,
                c2,
            );
        }
        update(
            p.bias.as_slice_mut().expect("contiguous"),
            g.bias.as_slice().expect("contiguous"),
            m.bias.as_slice_mut().expect("contiguous"),
            v.bias.as_slice_mut().expect("contiguous"),
            &cfg,
            0.0,
            c1,
            c2,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn layer(w: f64, b: f64) -> LayerParams {
        LayerParams {
            weights: vec![array![[w, -w]]],
            bias: Array1::from_elem(2, b),
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = vec![layer(0.7, 0.1)];
        let before = params.clone();
        let grads = vec![LayerParams::zeros_like(&params[0])];
        let mut state = AdamState::new(AdamConfig::new(0.01, 0.0), &params);
        adam_step("g", &mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![layer(0.0, 0.0)];
        let grads = vec![LayerParams {
            weights: vec![array![[3.0, -0.5]]],
            bias: array![10.0, -2.0],
        }];
        let mut state = AdamState::new(AdamConfig::new(0.005, 0.0), &params);
        adam_step("g", &mut params, &grads, &mut state).unwrap();
        let w = &params[0].weights[0];
        assert!((w[[0, 0]] + 0.005).abs() < 1e-10);
        assert!((w[[0, 1]] - 0.005).abs() < 1e-10);
        assert!((params[0].bias[0] + 0.005).abs() < 1e-10);
        assert!((params[0].bias[1] - 0.005).abs() < 1e-10);
    }

    #[test]
    fn momentum_accumulates() {
        let grads = vec![LayerParams {
            weights: vec![array![[1.0, 1.0]]],
            bias: array![1.0, 1.0],
        }];
        let mut one = vec![layer(0.0, 0.0)];
        let mut s1 = AdamState::new(AdamConfig::new(0.05, 0.0), &one);
        adam_step("g", &mut one, &grads, &mut s1).unwrap();
        let mut two = one.clone();
        adam_step("g", &mut two, &grads, &mut s1).unwrap();
        assert!(two[0].weights[0][[0, 0]] < one[0].weights[0][[0, 0]]);
        assert!(two[0].weights[0][[0, 0]].abs() > one[0].weights[0][[0, 0]].abs());
    }

    #[test]
    fn weight_decay_skips_bias() {
        let mut params = vec![layer(1.0, 1.0)];
        let grads = vec![LayerParams::zeros_like(&params[0])];
        let mut state = AdamState::new(AdamConfig::new(0.01, 0.0005), &params);
        adam_step("g", &mut params, &grads, &mut state).unwrap();
        assert!(params[0].weights[0][[0, 0]] < 1.0);
        assert_eq!(params[0].bias[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut params = vec![layer(0.0, 0.0), layer(0.0, 0.0)];
        let mut grads: Vec<_> = params.iter().map(LayerParams::zeros_like).collect();
        grads[1].weights[0][[0, 1]] = f64::NAN;
        let mut state = AdamState::new(AdamConfig::new(0.01, 0.0), &params);
        let err = adam_step("mla", &mut params, &grads, &mut state).unwrap_err();
        assert!(err.to_string().contains("mla.1.w0"), "{err}");
        assert_eq!(state.step_count, 0);
    }
}
