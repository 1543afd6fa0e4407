use ndarray::Array2;
use serde::{Deserialize, Serialize};

const LOG_CLAMP: f64 = 1e-12;

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub semi: f64,
    pub sim: f64,
    pub total: f64,
    pub lambda: f64,
    pub xi: f64,
    pub sigma: f64,
}

/// `-sum_{i in mask} ln Z[i, y_i]`; probabilities are clamped at 1e-12.
pub fn cross_entropy_masked(z: &Array2<f64>, labels: &[usize], mask: &[bool]) -> f64 {
    let mut loss = 0.0;
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let mut p = z[[i, y]];
        if p < LOG_CLAMP {
            log::warn!("predicted probability {p:e} for the true class of node {i} clamped to {LOG_CLAMP:e}");
            p = LOG_CLAMP;
        }
        loss -= p.ln();
    }
    loss
}

/// Gradient of the masked cross-entropy w.r.t. the logits feeding `z`.
pub fn cross_entropy_logit_grad(z: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Array2<f64> {
    let mut d = Array2::<f64>::zeros(z.raw_dim());
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m {
            d.row_mut(i).assign(&z.row(i));
            d[[i, y]] -= 1.0;
        }
    }
    d
}

fn sim_argument(t: &Array2<f64>, labels: &[usize], mask: &[bool], xi: f64, sigma: f64) -> f64 {
    let mut sq = 0.0;
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        for (j, &tv) in t.row(i).iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            sq += (target - tv) * (target - tv);
        }
    }
    (sq + xi) / (2.0 * sigma * sigma)
}

/// `tanh((sum_{i in mask} sum_j (Y_ij - T_ij)^2 + xi) / (2 sigma^2))`.
pub fn similarity_loss(t: &Array2<f64>, labels: &[usize], mask: &[bool], xi: f64, sigma: f64) -> f64 {
    sim_argument(t, labels, mask, xi, sigma).tanh()
}

/// Gradient of the similarity loss w.r.t. `t`.
pub fn similarity_loss_grad(t: &Array2<f64>, labels: &[usize], mask: &[bool], xi: f64, sigma: f64) -> Array2<f64> {
    let arg = sim_argument(t, labels, mask, xi, sigma);
    let sech2 = 1.0 / arg.cosh().powi(2);
    let scale = sech2 / (sigma * sigma);
    let mut d = Array2::<f64>::zeros(t.raw_dim());
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *dv = -scale * (target - t[[i, j]]);
        }
    }
    d
}

pub fn total_loss(semi: f64, sim: f64, lambda: f64) -> f64 {
    semi + lambda * sim
}
