#![allow(dead_code)]

use amagcn::rng;
use amagcn::{AmaGcn, AmaGcnConfig, ChebBasis};
use ndarray::Array2;
use rand::Rng as _;

pub struct Instance {
    pub adjacency: Array2<f64>,
    pub x: Array2<f64>,
    pub basis: ChebBasis,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Random weighted graph with `n` nodes and `m` features; two classes,
/// every third node unlabeled.
pub fn instance(n: usize, m: usize, seed: u64) -> Instance {
    let mut r = rng::stream(seed, "test/instance");
    let mut adj = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let w: f64 = if r.random_bool(0.6) { r.random() } else { 0.0 };
            adj[[i, j]] = w;
            adj[[j, i]] = w;
        }
    }
    Instance {
        x: Array2::from_shape_simple_fn((n, m), || r.random_range(-1.0..1.0)),
        basis: ChebBasis::from_adjacency(&adj, 3).unwrap(),
        adjacency: adj.clone(),
        labels: (0..n).map(|i| (i * 7 + 3) % 5 % 2).collect(),
        mask: (0..n).map(|i| i % 3 != 0).collect(),
    }
}

pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// Compares every analytic gradient entry with a central difference of the
/// fused training loss under the same dropout masks.
///
/// An entry passes when `|a - n| <= 1e-4 * max(|a|, |n|)` or, for entries
/// that vanish, `|a - n| <= 1e-8`.
pub fn gradient_check(config: &AmaGcnConfig, inst: &Instance, seed: u64) -> GradCheck {
    let h = 1e-5;
    let mut model = AmaGcn::new(config, inst.x.ncols(), 2, seed).unwrap();
    let names: Vec<String> = model.params().tensors().into_iter().map(|(n, _, _)| n).collect();
    let loss = |m: &AmaGcn| m.loss_at(&inst.x, &inst.basis, &inst.labels, &inst.mask, true).unwrap().total;

    let sizes: Vec<usize> = model.params_mut().trainable_mut().iter().map(|t| t.len()).collect();
    let mut numeric: Vec<Vec<f64>> = Vec::new();
    for (t, &len) in sizes.iter().enumerate() {
        let mut col = Vec::with_capacity(len);
        for i in 0..len {
            let orig = model.params_mut().trainable_mut()[t][i];
            model.params_mut().trainable_mut()[t][i] = orig + h;
            let up = loss(&model);
            model.params_mut().trainable_mut()[t][i] = orig - h;
            let down = loss(&model);
            model.params_mut().trainable_mut()[t][i] = orig;
            col.push((up - down) / (2.0 * h));
        }
        numeric.push(col);
    }

    model.forward(&inst.x, &inst.basis, true).unwrap();
    let grads = model.backward(&inst.basis, &inst.labels, &inst.mask).unwrap();
    let mut out = GradCheck {
        checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    for (t, (analytic, num)) in grads.flat().into_iter().zip(&numeric).enumerate() {
        for (i, (&a, &n)) in analytic.iter().zip(num).enumerate() {
            out.checked += 1;
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            if scale > 1e-6 {
                out.worst_rel = out.worst_rel.max(diff / scale);
            }
            if !(diff <= 1e-4 * scale || diff <= 1e-8) {
                out.failures.push(format!("{}[{i}]: analytic {a:e}, numeric {n:e}", names[t]));
            }
        }
    }
    out
}
