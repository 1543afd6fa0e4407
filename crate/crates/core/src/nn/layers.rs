use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::spectral::ChebBasis;

/// Trainable weights of one layer: one matrix per Chebyshev term for graph
/// convolutions, a single matrix for dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<Array2<f64>>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, terms: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..terms)
            .map(|_| Array2::from_shape_simple_fn((in_dim, out_dim), || rng.random_range(-limit..limit)))
            .collect();
        LayerParams {
            weights,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(other: &LayerParams) -> Self {
        LayerParams {
            weights: other.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            bias: Array1::zeros(other.bias.len()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Linear => pre.clone(),
        }
    }

    fn backward(self, pre: &Array2<f64>, d_out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                let mut d = d_out.clone();
                d.zip_mut_with(pre, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            }
            Activation::Linear => d_out.clone(),
        }
    }
}

/// Values recorded by a layer's forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    pub activation: Activation,
}

fn check_dims(input: &Array2<f64>, params: &LayerParams) -> Result<()> {
    if input.ncols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "layer expects {} input columns, got {}",
            params.in_dim(),
            input.ncols()
        )));
    }
    if params.weights.iter().any(|w| w.dim() != (params.in_dim(), params.out_dim())) {
        return Err(Error::Shape("inconsistent layer weight shapes".into()));
    }
    Ok(())
}

/// `act(sum_k T_k . H . W_k + b)`.
pub fn cheb_conv_forward(
    input: &Array2<f64>,
    basis: &ChebBasis,
    params: &LayerParams,
    activation: Activation,
) -> Result<(Array2<f64>, LayerCache)> {
    check_dims(input, params)?;
    if basis.terms().len() != params.weights.len() {
        return Err(Error::Shape(format!(
            "basis has {} terms, layer has {} weight matrices",
            basis.terms().len(),
            params.weights.len()
        )));
    }
    if basis.num_nodes() != input.nrows() {
        return Err(Error::Shape(format!(
            "basis covers {} nodes, input has {} rows",
            basis.num_nodes(),
            input.nrows()
        )));
    }
    // T_0 = I
    let mut pre = input.dot(&params.weights[0]);
    for (t, w) in basis.terms().iter().zip(&params.weights).skip(1) {
        pre += &t.t().dot(&input.dot(w));
    }
    pre += &params.bias;
    let out = activation.apply(&pre);
    Ok((
        out,
        LayerCache {
            input: input.clone(),
            pre,
            activation,
        },
    ))
}

/// Returns parameter gradients and the gradient w.r.t. the layer input.
pub fn cheb_conv_backward(
    d_out: &Array2<f64>,
    basis: &ChebBasis,
    params: &LayerParams,
    cache: &LayerCache,
) -> (LayerParams, Array2<f64>) {
    let d_pre = cache.activation.backward(&cache.pre, d_out);
    let mut weights = Vec::with_capacity(params.weights.len());
    let mut d_input = Array2::<f64>::zeros(cache.input.raw_dim());
    for (k, (t, w)) in basis.terms().iter().zip(&params.weights).enumerate() {
        let g = if k == 0 { d_pre.clone() } else { t.t().dot(&d_pre) };
        weights.push(cache.input.t().dot(&g));
        d_input += &g.dot(&w.t());
    }
    let grads = LayerParams {
        weights,
        bias: d_pre.sum_axis(Axis(0)),
    };
    (grads, d_input)
}

pub fn dense_forward(
    input: &Array2<f64>,
    params: &LayerParams,
    activation: Activation,
) -> Result<(Array2<f64>, LayerCache)> {
    check_dims(input, params)?;
    if params.weights.len() != 1 {
        return Err(Error::Shape("dense layer takes exactly one weight matrix".into()));
    }
    let pre = input.dot(&params.weights[0]) + &params.bias;
    let out = activation.apply(&pre);
    Ok((
        out,
        LayerCache {
            input: input.clone(),
            pre,
            activation,
        },
    ))
}

pub fn dense_backward(d_out: &Array2<f64>, params: &LayerParams, cache: &LayerCache) -> (LayerParams, Array2<f64>) {
    let d_pre = cache.activation.backward(&cache.pre, d_out);
    let grads = LayerParams {
        weights: vec![cache.input.t().dot(&d_pre)],
        bias: d_pre.sum_axis(Axis(0)),
    };
    let d_input = d_pre.dot(&params.weights[0].t());
    (grads, d_input)
}

/// Inverted dropout. Returns the output and, when anything was dropped, the
/// per-element scale mask (0 or `1/(1-p)`) for the backward pass.
pub fn dropout(h: &Array2<f64>, p: f64, rng: &mut Rng, training: bool) -> (Array2<f64>, Option<Array2<f64>>) {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    if !training || p == 0.0 {
        return (h.clone(), None);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_simple_fn(h.raw_dim(), || if rng.random::<f64>() < p { 0.0 } else { keep });
    (h * &mask, Some(mask))
}

/// Elementwise maximum over the inputs, plus the index of the winning input
/// per element (earliest input wins ties).
pub fn maxpool_aggregate(inputs: &[&Array2<f64>]) -> Result<(Array2<f64>, Array2<u8>)> {
    let first = inputs.first().ok_or_else(|| Error::Shape("max-pool over an empty list".into()))?;
    if inputs.iter().any(|m| m.dim() != first.dim()) {
        return Err(Error::Shape("max-pool inputs differ in shape".into()));
    }
    let mut out = (*first).clone();
    let mut arg = Array2::<u8>::zeros(first.raw_dim());
    for (idx, m) in inputs.iter().enumerate().skip(1) {
        ndarray::Zip::from(&mut out)
            .and(&mut arg)
            .and(*m)
            .for_each(|o, a, &v| {
                if v > *o {
                    *o = v;
                    *a = idx as u8;
                }
            });
    }
    Ok((out, arg))
}

/// Routes `d_out` back to the argmax inputs.
pub fn maxpool_backward(d_out: &Array2<f64>, argmax: &Array2<u8>, count: usize) -> Vec<Array2<f64>> {
    let mut grads = vec![Array2::<f64>::zeros(d_out.raw_dim()); count];
    for ((idx, &g), &a) in d_out.indexed_iter().zip(argmax.iter()) {
        grads[a as usize][idx] = g;
    }
    grads
}

/// Column-wise concatenation in list order.
pub fn concat_aggregate(inputs: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let first = inputs.first().ok_or_else(|| Error::Shape("concat over an empty list".into()))?;
    if inputs.iter().any(|m| m.nrows() != first.nrows()) {
        return Err(Error::Shape("concat inputs differ in row count".into()));
    }
    let views: Vec<_> = inputs.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

pub fn concat_backward(d_out: &Array2<f64>, widths: &[usize]) -> Vec<Array2<f64>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = d_out.slice(s![.., start..start + w]).to_owned();
            start += w;
            part
        })
        .collect()
}

/// Row-wise softmax (max-shifted).
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Gradient w.r.t. logits given the gradient w.r.t. softmax outputs.
pub fn softmax_backward(probs: &Array2<f64>, d_probs: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::<f64>::zeros(probs.raw_dim());
    for ((mut d_row, p_row), g_row) in d.rows_mut().into_iter().zip(probs.rows()).zip(d_probs.rows()) {
        let dot = p_row.dot(&g_row);
        for ((dv, &p), &g) in d_row.iter_mut().zip(p_row).zip(g_row) {
            *dv = p * (g - dot);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::chebyshev_basis;
    use ndarray::array;
    use rand::SeedableRng;

    fn rand_mat(r: usize, c: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn rand_sym(n: usize, rng: &mut Rng) -> Array2<f64> {
        let a = rand_mat(n, n, rng);
        (&a + &a.t()) * 0.25
    }

    #[test]
    fn identity_filter() {
        let mut rng = Rng::seed_from_u64(1);
        let basis = chebyshev_basis(&rand_sym(4, &mut rng), 0);
        let h = rand_mat(4, 3, &mut rng);
        let params = LayerParams {
            weights: vec![Array2::eye(3)],
            bias: Array1::zeros(3),
        };
        let (out, _) = cheb_conv_forward(&h, &basis, &params, Activation::Linear).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = Rng::seed_from_u64(2);
        let basis = chebyshev_basis(&rand_sym(5, &mut rng), 3);
        let h = rand_mat(5, 2, &mut rng);
        let params = LayerParams {
            weights: vec![Array2::zeros((2, 3)); 4],
            bias: array![0.5, -1.0, 2.0],
        };
        let (out, _) = cheb_conv_forward(&h, &basis, &params, Activation::Linear).unwrap();
        for row in out.rows() {
            assert_eq!(row, params.bias.view());
        }
    }

    #[test]
    fn cheb_conv_matches_triple_loop() {
        let mut rng = Rng::seed_from_u64(3);
        let basis = chebyshev_basis(&rand_sym(5, &mut rng), 3);
        let h = rand_mat(5, 3, &mut rng);
        let params = LayerParams::glorot(3, 4, 4, &mut rng);
        let (out, _) = cheb_conv_forward(&h, &basis, &params, Activation::Relu).unwrap();
        for i in 0..5 {
            for o in 0..4 {
                let mut acc = params.bias[o];
                for (t, w) in basis.terms().iter().zip(&params.weights) {
                    for j in 0..5 {
                        for c in 0..3 {
                            acc += t[[i, j]] * h[[j, c]] * w[[c, o]];
                        }
                    }
                }
                assert!((out[[i, o]] - acc.max(0.0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cheb_conv_shape_errors() {
        let mut rng = Rng::seed_from_u64(4);
        let basis = chebyshev_basis(&rand_sym(5, &mut rng), 2);
        let params = LayerParams::glorot(3, 4, 3, &mut rng);
        assert!(cheb_conv_forward(&rand_mat(5, 2, &mut rng), &basis, &params, Activation::Relu).is_err());
        let wrong_order = LayerParams::glorot(3, 4, 4, &mut rng);
        assert!(cheb_conv_forward(&rand_mat(5, 3, &mut rng), &basis, &wrong_order, Activation::Relu).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 0.0]];
        let (m, arg) = maxpool_aggregate(&[&a, &b]).unwrap();
        assert_eq!(m, array![[3.0, 2.0]]);
        assert_eq!(arg, array![[1u8, 0]]);
        assert_eq!(maxpool_aggregate(&[&a]).unwrap().0, a);
        let (m, arg) = maxpool_aggregate(&[&a, &a]).unwrap();
        assert_eq!(m, a);
        assert!(arg.iter().all(|&i| i == 0), "ties go to the earliest input");
        assert!(maxpool_aggregate(&[]).is_err());
        assert!(maxpool_aggregate(&[&a, &array![[1.0]]]).is_err());
    }

    #[test]
    fn maxpool_permutation_invariant_in_value() {
        let mut rng = Rng::seed_from_u64(5);
        let xs: Vec<_> = (0..3).map(|_| rand_mat(4, 3, &mut rng)).collect();
        let (m1, _) = maxpool_aggregate(&[&xs[0], &xs[1], &xs[2]]).unwrap();
        let (m2, _) = maxpool_aggregate(&[&xs[2], &xs[0], &xs[1]]).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn concat_examples() {
        let a = array![[1.0], [2.0]];
        let b = array![[3.0, 4.0, 5.0], [6.0, 7.0, 8.0]];
        let c = concat_aggregate(&[&a, &b]).unwrap();
        assert_eq!(c, array![[1.0, 3.0, 4.0, 5.0], [2.0, 6.0, 7.0, 8.0]]);
        assert_eq!(concat_aggregate(&[&a]).unwrap(), a);
        assert!(concat_aggregate(&[&a, &array![[1.0]]]).is_err());
        let parts = concat_backward(&c, &[1, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn softmax_is_stochastic_and_shift_invariant() {
        let mut rng = Rng::seed_from_u64(6);
        let logits = rand_mat(6, 3, &mut rng) * 20.0;
        let p = softmax(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        let shifted = &logits + &array![[5.0], [-3.0], [100.0], [0.0], [1.0], [-50.0]];
        let q = softmax(&shifted);
        assert!(p.iter().zip(q.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Rng::seed_from_u64(7);
        let h = rand_mat(3, 3, &mut rng);
        assert_eq!(dropout(&h, 0.0, &mut rng, true).0, h);
        assert_eq!(dropout(&h, 0.9, &mut rng, false).0, h);
        let (out, mask) = dropout(&h, 0.5, &mut rng, true);
        let mask = mask.unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        assert_eq!(out, &h * &mask);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = Rng::seed_from_u64(8);
        let h = Array2::from_elem((1, 100_000), 1.0);
        let (out, _) = dropout(&h, 0.3, &mut rng, true);
        let mean = out.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
