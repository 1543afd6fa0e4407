//! The AMA-GCN model: a multi-layer-aggregation Chebyshev GCN backbone and an
//! auxiliary two-layer GCN channel trained jointly through a fused loss.
//!
//! Backbone wiring for `L` graph-convolution layers with outputs `H_1..H_L`
//! and `mid = (L + 1) / 2`:
//!
//! ```text
//! LA1     = max(H_1 .. H_mid)        elementwise
//! LA2     = max(H_mid .. H_L)        elementwise
//! h_final = [LA1 | LA2]              (n x 2*hidden)
//! Z       = softmax(h_final W + b)
//! T       = softmax(GC_2(GC_1(h_final)))   auxiliary channel
//! ```
//!
//! The `noA` ablation swaps the backbone for a plain two-layer GCN whose
//! hidden output feeds the auxiliary channel.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, adam_step, cheb_conv_backward, cheb_conv_forward, concat_aggregate, concat_backward, dense_backward,
    dense_forward, maxpool_aggregate, maxpool_backward, softmax, softmax_backward, Activation, AdamConfig, AdamState,
    LayerCache, LayerParams, LossTerms,
};
use crate::rng::{self, Rng};
use crate::spectral::{ChebBasis, PopulationGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Hand-picked measures with unit weights.
    #[serde(rename = "noP")]
    NoP,
    /// PSWE selection with unit weights.
    #[serde(rename = "noW")]
    NoW,
    /// Plain two-layer GCN backbone.
    #[serde(rename = "noA")]
    NoA,
    /// No similarity loss.
    #[serde(rename = "noS")]
    NoS,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoP, Ablation::NoW, Ablation::NoA, Ablation::NoS];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoP => "noP",
            Ablation::NoW => "noW",
            Ablation::NoA => "noA",
            Ablation::NoS => "noS",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full, noP, noW, noA or noS)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmaGcnConfig {
    pub mla_layers: usize,
    pub adu_layers: usize,
    pub hidden_dim: usize,
    pub cheb_order: usize,
    pub dropout: f64,
    pub lr_mla: f64,
    pub lr_adu: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub xi: f64,
    pub sigma: f64,
    pub ablation: Ablation,
    /// When false the auxiliary channel is not built at all.
    pub adu_channel: bool,
}

impl Default for AmaGcnConfig {
    fn default() -> Self {
        AmaGcnConfig {
            mla_layers: 5,
            adu_layers: 2,
            hidden_dim: 16,
            cheb_order: 3,
            dropout: 0.3,
            lr_mla: 0.005,
            lr_adu: 0.05,
            weight_decay: 0.0005,
            epochs: 300,
            lambda: 1.0,
            xi: 1e-6,
            sigma: 1.0,
            ablation: Ablation::Full,
            adu_channel: true,
        }
    }
}

impl AmaGcnConfig {
    /// Applies the ablation overrides (`noS` forces lambda = 0).
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.ablation == Ablation::NoS {
            c.lambda = 0.0;
        }
        c
    }

    pub fn plain_backbone(&self) -> bool {
        self.ablation == Ablation::NoA
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.mla_layers == 0 || self.adu_layers == 0 || self.hidden_dim == 0 {
            return bad("layer counts and hidden_dim must be positive");
        }
        if self.mla_layers > 255 {
            return bad("mla_layers must be at most 255");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and nonnegative");
        }
        if !(self.xi > 0.0 && self.sigma > 0.0) {
            return bad("xi and sigma must be positive");
        }
        if !(self.lr_mla > 0.0 && self.lr_adu > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight_decay nonnegative");
        }
        Ok(())
    }

    fn terms(&self) -> usize {
        self.cheb_order + 1
    }

    fn joint_width(&self) -> usize {
        if self.plain_backbone() {
            self.hidden_dim
        } else {
            2 * self.hidden_dim
        }
    }
}

/// All trainable weights and their optimizer state.
///
/// `mla` holds the backbone in forward order: `mla_layers` graph convolutions
/// followed by the dense output head (or, for the plain backbone, its two
/// graph convolutions). `adu` holds the auxiliary channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mla: Vec<LayerParams>,
    pub adu: Vec<LayerParams>,
    pub adam_mla: AdamState,
    pub adam_adu: AdamState,
}

impl ModelParams {
    pub fn init(config: &AmaGcnConfig, num_features: usize, num_classes: usize, seed: u64) -> Self {
        let terms = config.terms();
        let h = config.hidden_dim;
        let layer = |label: String, i: usize, o: usize, t: usize| LayerParams::glorot(i, o, t, &mut rng::stream(seed, &label));
        let mla: Vec<LayerParams> = if config.plain_backbone() {
            vec![
                layer("init/mla/0".into(), num_features, h, terms),
                layer("init/mla/1".into(), h, num_classes, terms),
            ]
        } else {
            let mut v: Vec<_> = (0..config.mla_layers)
                .map(|l| layer(format!("init/mla/{l}"), if l == 0 { num_features } else { h }, h, terms))
                .collect();
            v.push(layer(format!("init/mla/{}", config.mla_layers), 2 * h, num_classes, 1));
            v
        };
        let adu: Vec<LayerParams> = (0..config.adu_layers)
            .map(|l| {
                let i = if l == 0 { config.joint_width() } else { h };
                let o = if l + 1 == config.adu_layers { num_classes } else { h };
                layer(format!("init/adu/{l}"), i, o, terms)
            })
            .collect();
        ModelParams {
            adam_mla: AdamState::new(AdamConfig::new(config.lr_mla, config.weight_decay), &mla),
            adam_adu: AdamState::new(AdamConfig::new(config.lr_adu, config.weight_decay), &adu),
            mla,
            adu,
        }
    }

    /// Every tensor in declaration order: backbone, auxiliary channel, then
    /// the Adam moments of each group. Weights precede the bias in a layer.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        let groups: [(&str, &[LayerParams]); 6] = [
            ("mla", &self.mla),
            ("adu", &self.adu),
            ("adam_mla.m", &self.adam_mla.first_moment),
            ("adam_mla.v", &self.adam_mla.second_moment),
            ("adam_adu.m", &self.adam_adu.first_moment),
            ("adam_adu.v", &self.adam_adu.second_moment),
        ];
        for (group, layers) in groups {
            for (l, p) in layers.iter().enumerate() {
                for (k, w) in p.weights.iter().enumerate() {
                    out.push((format!("{group}.{l}.w{k}"), w.shape().to_vec(), w.as_slice().expect("standard layout")));
                }
                out.push((format!("{group}.{l}.bias"), vec![p.bias.len()], p.bias.as_slice().expect("contiguous")));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        let groups = [
            &mut self.mla,
            &mut self.adu,
            &mut self.adam_mla.first_moment,
            &mut self.adam_mla.second_moment,
            &mut self.adam_adu.first_moment,
            &mut self.adam_adu.second_moment,
        ];
        for layers in groups {
            for p in layers.iter_mut() {
                for w in p.weights.iter_mut() {
                    out.push(w.as_slice_mut().expect("standard layout"));
                }
                out.push(p.bias.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    /// Trainable tensors only (backbone then auxiliary channel).
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for p in self.mla.iter_mut().chain(self.adu.iter_mut()) {
            for w in p.weights.iter_mut() {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            out.push(p.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }
}

/// Gradients of the fused loss, shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub mla: Vec<LayerParams>,
    pub adu: Vec<LayerParams>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for p in self.mla.iter().chain(&self.adu) {
            for w in &p.weights {
                out.push(w.as_slice().expect("standard layout"));
            }
            out.push(p.bias.as_slice().expect("contiguous"));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct GcStep {
    mask: Option<Array2<f64>>,
    cache: LayerCache,
}

/// Forward record of the backbone.
#[derive(Debug, Clone)]
pub struct MlaPass {
    pub z: Array2<f64>,
    pub h_final: Array2<f64>,
    steps: Vec<GcStep>,
    pools: Option<(Array2<u8>, Array2<u8>)>,
    head: Option<LayerCache>,
}

/// Forward record of the auxiliary channel.
#[derive(Debug, Clone)]
pub struct AduPass {
    pub t: Array2<f64>,
    steps: Vec<GcStep>,
}

fn gc_stack_forward(
    input: &Array2<f64>,
    basis: &ChebBasis,
    layers: &[LayerParams],
    activations: impl Fn(usize) -> Activation,
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> Result<(Vec<Array2<f64>>, Vec<GcStep>)> {
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    let mut steps = Vec::with_capacity(layers.len());
    for (l, params) in layers.iter().enumerate() {
        let h = outputs.last().unwrap_or(input);
        let (dropped, mask) = match rng.as_deref_mut() {
            Some(r) => nn::dropout(h, dropout, r, true),
            None => (h.clone(), None),
        };
        let (out, cache) = cheb_conv_forward(&dropped, basis, params, activations(l))?;
        outputs.push(out);
        steps.push(GcStep { mask, cache });
    }
    Ok((outputs, steps))
}

/// Backward through a chain of graph convolutions. `d_outputs[l]` carries any
/// gradient arriving directly at layer `l`'s output.
fn gc_stack_backward(
    steps: &[GcStep],
    layers: &[LayerParams],
    basis: &ChebBasis,
    mut d_outputs: Vec<Array2<f64>>,
) -> (Vec<LayerParams>, Array2<f64>) {
    let mut grads: Vec<Option<LayerParams>> = vec![None; layers.len()];
    let mut d_input = None;
    for l in (0..layers.len()).rev() {
        let (g, mut d_in) = cheb_conv_backward(&d_outputs[l], basis, &layers[l], &steps[l].cache);
        if let Some(mask) = &steps[l].mask {
            d_in *= mask;
        }
        grads[l] = Some(g);
        if l > 0 {
            d_outputs[l - 1] += &d_in;
        } else {
            d_input = Some(d_in);
        }
    }
    (
        grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        d_input.expect("at least one layer"),
    )
}

/// Backbone forward pass; dropout is active when `rng` is given.
pub fn mla_forward(
    features: &Array2<f64>,
    basis: &ChebBasis,
    params: &[LayerParams],
    config: &AmaGcnConfig,
    rng: Option<&mut Rng>,
) -> Result<MlaPass> {
    if config.plain_backbone() {
        let (mut outputs, steps) = gc_stack_forward(
            features,
            basis,
            params,
            |l| if l == 0 { Activation::Relu } else { Activation::Linear },
            config.dropout,
            rng,
        )?;
        let logits = outputs.pop().expect("two layers");
        let h_final = outputs.pop().expect("two layers");
        return Ok(MlaPass {
            z: softmax(&logits),
            h_final,
            steps,
            pools: None,
            head: None,
        });
    }
    let depth = params.len() - 1;
    let (outputs, steps) = gc_stack_forward(features, basis, &params[..depth], |_| Activation::Relu, config.dropout, rng)?;
    let mid = depth.div_ceil(2);
    let first: Vec<&Array2<f64>> = outputs[..mid].iter().collect();
    let second: Vec<&Array2<f64>> = outputs[mid - 1..].iter().collect();
    let (la1, arg1) = maxpool_aggregate(&first)?;
    let (la2, arg2) = maxpool_aggregate(&second)?;
    let h_final = concat_aggregate(&[&la1, &la2])?;
    let (logits, head) = dense_forward(&h_final, &params[depth], Activation::Linear)?;
    Ok(MlaPass {
        z: softmax(&logits),
        h_final,
        steps,
        pools: Some((arg1, arg2)),
        head: Some(head),
    })
}

/// Auxiliary channel forward pass over the backbone's joint representation.
pub fn adu_forward(
    h_final: &Array2<f64>,
    basis: &ChebBasis,
    params: &[LayerParams],
    config: &AmaGcnConfig,
    rng: Option<&mut Rng>,
) -> Result<AduPass> {
    let last = params.len() - 1;
    let (mut outputs, steps) = gc_stack_forward(
        h_final,
        basis,
        params,
        |l| if l == last { Activation::Linear } else { Activation::Relu },
        config.dropout,
        rng,
    )?;
    let logits = outputs.pop().expect("at least one layer");
    Ok(AduPass {
        t: softmax(&logits),
        steps,
    })
}

/// Loss values of a recorded pass on the masked rows.
pub fn loss_terms(
    mla: &MlaPass,
    adu: Option<&AduPass>,
    labels: &[usize],
    mask: &[bool],
    config: &AmaGcnConfig,
) -> LossTerms {
    let semi = nn::cross_entropy_masked(&mla.z, labels, mask);
    let sim = adu.map_or(0.0, |a| nn::similarity_loss(&a.t, labels, mask, config.xi, config.sigma));
    LossTerms {
        semi,
        sim,
        total: nn::total_loss(semi, sim, config.lambda),
        lambda: config.lambda,
        xi: config.xi,
        sigma: config.sigma,
    }
}

/// Exact reverse-mode gradients of `semi + lambda * sim` (weight decay is
/// applied by the optimizer, not here).
pub fn backward(
    mla: &MlaPass,
    adu: Option<&AduPass>,
    basis: &ChebBasis,
    params: &ModelParams,
    labels: &[usize],
    mask: &[bool],
    config: &AmaGcnConfig,
) -> Gradients {
    // auxiliary channel first: it contributes to d h_final
    let (adu_grads, d_joint) = match adu {
        Some(a) if config.lambda != 0.0 => {
            let d_t = nn::similarity_loss_grad(&a.t, labels, mask, config.xi, config.sigma) * config.lambda;
            let d_logits = softmax_backward(&a.t, &d_t);
            let mut d_outputs: Vec<Array2<f64>> =
                a.steps.iter().map(|s| Array2::zeros((s.cache.pre.nrows(), s.cache.pre.ncols()))).collect();
            *d_outputs.last_mut().expect("at least one layer") = d_logits;
            let (g, d_in) = gc_stack_backward(&a.steps, &params.adu, basis, d_outputs);
            (g, Some(d_in))
        }
        _ => (params.adu.iter().map(LayerParams::zeros_like).collect(), None),
    };

    let d_logits = nn::cross_entropy_logit_grad(&mla.z, labels, mask);
    let mut d_outputs: Vec<Array2<f64>> =
        mla.steps.iter().map(|s| Array2::zeros((s.cache.pre.nrows(), s.cache.pre.ncols()))).collect();
    let mut head_grad = None;
    match (&mla.pools, &mla.head) {
        (Some((arg1, arg2)), Some(head)) => {
            let depth = mla.steps.len();
            let (g, mut d_hf) = dense_backward(&d_logits, &params.mla[depth], head);
            head_grad = Some(g);
            if let Some(d) = &d_joint {
                d_hf += d;
            }
            let width = mla.h_final.ncols() / 2;
            let parts = concat_backward(&d_hf, &[width, width]);
            let mid = depth.div_ceil(2);
            for (l, g) in maxpool_backward(&parts[0], arg1, mid).into_iter().enumerate() {
                d_outputs[l] += &g;
            }
            for (l, g) in maxpool_backward(&parts[1], arg2, depth - mid + 1).into_iter().enumerate() {
                d_outputs[mid - 1 + l] += &g;
            }
        }
        _ => {
            d_outputs[1] += &d_logits;
            if let Some(d) = &d_joint {
                d_outputs[0] += d;
            }
        }
    }
    let gc_layers = &params.mla[..mla.steps.len()];
    let (mut mla_grads, _) = gc_stack_backward(&mla.steps, gc_layers, basis, d_outputs);
    mla_grads.extend(head_grad);
    Gradients {
        mla: mla_grads,
        adu: adu_grads,
    }
}

/// Per-node argmax prediction (lowest class index on ties) and class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub scores: Array2<f64>,
}

pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

struct Tape {
    mla: MlaPass,
    adu: Option<AduPass>,
}

/// A model instance: configuration, parameters, its private dropout streams,
/// and the record of the latest forward pass.
pub struct AmaGcn {
    config: AmaGcnConfig,
    params: ModelParams,
    mla_rng: Rng,
    adu_rng: Rng,
    tape: Option<Tape>,
}

impl AmaGcn {
    pub fn new(config: &AmaGcnConfig, num_features: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let config = config.resolved();
        Ok(AmaGcn {
            params: ModelParams::init(&config, num_features, num_classes, seed),
            mla_rng: rng::stream(seed, "dropout/mla"),
            adu_rng: rng::stream(seed, "dropout/adu"),
            config,
            tape: None,
        })
    }

    pub fn config(&self) -> &AmaGcnConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        self.tape = None;
        &mut self.params
    }

    fn run(&self, x: &Array2<f64>, basis: &ChebBasis, rngs: Option<(&mut Rng, &mut Rng)>) -> Result<Tape> {
        let (mla_rng, adu_rng) = match rngs {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let mla = mla_forward(x, basis, &self.params.mla, &self.config, mla_rng)?;
        let adu = if self.config.adu_channel {
            Some(adu_forward(&mla.h_final, basis, &self.params.adu, &self.config, adu_rng)?)
        } else {
            None
        };
        Ok(Tape { mla, adu })
    }

    /// Forward pass recorded for [`AmaGcn::backward`]. Returns `Z` and `T`.
    pub fn forward(&mut self, x: &Array2<f64>, basis: &ChebBasis, training: bool) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let tape = if training {
            let mut mla_rng = self.mla_rng.clone();
            let mut adu_rng = self.adu_rng.clone();
            let tape = self.run(x, basis, Some((&mut mla_rng, &mut adu_rng)))?;
            self.mla_rng = mla_rng;
            self.adu_rng = adu_rng;
            tape
        } else {
            self.run(x, basis, None)?
        };
        let out = (tape.mla.z.clone(), tape.adu.as_ref().map(|a| a.t.clone()));
        self.tape = Some(tape);
        Ok(out)
    }

    /// Loss at the current parameters without advancing any random stream:
    /// a training-mode call reuses the dropout masks the next
    /// [`AmaGcn::forward`] will draw.
    pub fn loss_at(&self, x: &Array2<f64>, basis: &ChebBasis, labels: &[usize], mask: &[bool], training: bool) -> Result<LossTerms> {
        let tape = if training {
            let mut a = self.mla_rng.clone();
            let mut b = self.adu_rng.clone();
            self.run(x, basis, Some((&mut a, &mut b)))?
        } else {
            self.run(x, basis, None)?
        };
        Ok(loss_terms(&tape.mla, tape.adu.as_ref(), labels, mask, &self.config))
    }

    pub fn loss(&self, labels: &[usize], mask: &[bool]) -> Result<LossTerms> {
        let tape = self.tape.as_ref().ok_or(Error::NoForward)?;
        Ok(loss_terms(&tape.mla, tape.adu.as_ref(), labels, mask, &self.config))
    }

    /// Gradients of the fused loss for the recorded pass; consumes the record.
    pub fn backward(&mut self, basis: &ChebBasis, labels: &[usize], mask: &[bool]) -> Result<Gradients> {
        let tape = self.tape.take().ok_or(Error::NoForward)?;
        Ok(backward(&tape.mla, tape.adu.as_ref(), basis, &self.params, labels, mask, &self.config))
    }

    /// One Adam update per parameter group.
    pub fn apply_gradients(&mut self, grads: &Gradients) -> Result<()> {
        let p = &mut self.params;
        adam_step("mla", &mut p.mla, &grads.mla, &mut p.adam_mla)?;
        adam_step("adu", &mut p.adu, &grads.adu, &mut p.adam_adu)
    }

    /// Forward, fused loss on the training rows, backward, optimizer update.
    pub fn train_step(&mut self, graph: &PopulationGraph, basis: &ChebBasis) -> Result<LossTerms> {
        if !graph.train_mask.iter().any(|&m| m) {
            return Err(Error::Data("training mask is empty".into()));
        }
        self.forward(&graph.features, basis, true)?;
        let loss = self.loss(&graph.labels, &graph.train_mask)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = self.backward(basis, &graph.labels, &graph.train_mask)?;
        self.apply_gradients(&grads)?;
        Ok(loss)
    }

    /// Evaluation-mode prediction from the backbone output `Z`.
    pub fn predict(&self, x: &Array2<f64>, basis: &ChebBasis) -> Result<Prediction> {
        let pass = mla_forward(x, basis, &self.params.mla, &self.config, None)?;
        Ok(Prediction {
            classes: argmax_rows(&pass.z),
            scores: pass.z,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::chebyshev_basis;
    use ndarray::{array, Array1};
    use rand::{Rng as _, SeedableRng};

    fn instance(n: usize, m: usize, seed: u64) -> (Array2<f64>, ChebBasis, Vec<usize>, Vec<bool>) {
        let mut r = Rng::seed_from_u64(seed);
        let mut adj = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let w: f64 = if r.random_bool(0.5) { r.random() } else { 0.0 };
                adj[[i, j]] = w;
                adj[[j, i]] = w;
            }
        }
        let basis = ChebBasis::from_adjacency(&adj, 3).unwrap();
        let x = Array2::from_shape_simple_fn((n, m), || r.random_range(-1.0..1.0));
        let labels = (0..n).map(|i| i % 2).collect();
        let mask = (0..n).map(|i| i % 3 != 0).collect();
        (x, basis, labels, mask)
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("noS".parse::<Ablation>().unwrap(), Ablation::NoS);
        assert_eq!("nop".parse::<Ablation>().unwrap(), Ablation::NoP);
        assert!("bogus".parse::<Ablation>().is_err());
        let c = AmaGcnConfig {
            ablation: Ablation::NoS,
            ..Default::default()
        };
        assert_eq!(c.resolved().lambda, 0.0);
        assert_eq!(serde_json::to_string(&Ablation::NoW).unwrap(), "\"noW\"");
    }

    #[test]
    fn identity_wiring() {
        // one feature; every GC layer the identity filter
        let n = 4;
        let x = array![[1.0], [2.0], [0.5], [3.0]];
        let basis = chebyshev_basis(&Array2::zeros((n, n)), 0);
        let config = AmaGcnConfig {
            hidden_dim: 1,
            cheb_order: 0,
            dropout: 0.0,
            ..Default::default()
        };
        let mut params = ModelParams::init(&config, 1, 2, 0);
        for p in params.mla.iter_mut().take(5) {
            p.weights = vec![array![[1.0]]];
            p.bias = Array1::zeros(1);
        }
        let pass = mla_forward(&x, &basis, &params.mla, &config, None).unwrap();
        let want = ndarray::concatenate(ndarray::Axis(1), &[x.view(), x.view()]).unwrap();
        assert_eq!(pass.h_final, want);
    }

    #[test]
    fn outputs_are_row_stochastic() {
        let (x, basis, labels, mask) = instance(9, 5, 1);
        let mut model = AmaGcn::new(&AmaGcnConfig::default(), 5, 2, 3).unwrap();
        let graph = PopulationGraph::new(
            Array2::zeros((9, 9)),
            x.clone(),
            labels.clone(),
            2,
            mask.clone(),
            mask.iter().map(|m| !m).collect(),
        )
        .unwrap();
        for _ in 0..3 {
            let (z, t) = model.forward(&x, &basis, false).unwrap();
            for row in z.rows().into_iter().chain(t.as_ref().unwrap().rows()) {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            model.train_step(&graph, &basis).unwrap();
        }
        let _ = labels;
    }

    #[test]
    fn zero_adu_gives_uniform_t() {
        let (x, basis, _, _) = instance(6, 3, 2);
        let config = AmaGcnConfig::default();
        let mut params = ModelParams::init(&config, 3, 2, 5);
        for p in params.adu.iter_mut() {
            *p = LayerParams::zeros_like(p);
        }
        let mla = mla_forward(&x, &basis, &params.mla, &config, None).unwrap();
        let adu = adu_forward(&mla.h_final, &basis, &params.adu, &config, None).unwrap();
        assert!(adu.t.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn backward_before_forward() {
        let (_, basis, labels, mask) = instance(5, 2, 3);
        let mut model = AmaGcn::new(&AmaGcnConfig::default(), 2, 2, 0).unwrap();
        assert!(matches!(model.backward(&basis, &labels, &mask), Err(Error::NoForward)));
        assert!(matches!(model.loss(&labels, &mask), Err(Error::NoForward)));
    }

    #[test]
    fn hidden_width_reshapes_consistently() {
        for (hidden, depth) in [(4, 5), (7, 3), (16, 2)] {
            let (x, basis, _, _) = instance(6, 3, 4);
            let config = AmaGcnConfig {
                hidden_dim: hidden,
                mla_layers: depth,
                ..Default::default()
            };
            let params = ModelParams::init(&config, 3, 3, 0);
            let pass = mla_forward(&x, &basis, &params.mla, &config, None).unwrap();
            assert_eq!(pass.h_final.ncols(), 2 * hidden);
            assert_eq!(pass.z.ncols(), 3);
            let adu = adu_forward(&pass.h_final, &basis, &params.adu, &config, None).unwrap();
            assert_eq!(adu.t.ncols(), 3);
        }
    }

    #[test]
    fn prediction_ties_and_idempotence() {
        assert_eq!(argmax_rows(&array![[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]), vec![0, 0, 1]);
        let (x, basis, _, _) = instance(7, 3, 5);
        let model = AmaGcn::new(&AmaGcnConfig::default(), 3, 2, 1).unwrap();
        assert_eq!(model.predict(&x, &basis).unwrap(), model.predict(&x, &basis).unwrap());
    }

    #[test]
    fn lambda_zero_decouples_adu() {
        let (x, basis, labels, mask) = instance(8, 4, 6);
        let config = AmaGcnConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let mut model = AmaGcn::new(&config, 4, 2, 2).unwrap();
        model.forward(&x, &basis, true).unwrap();
        let loss = model.loss(&labels, &mask).unwrap();
        assert_eq!(loss.total, loss.semi);
        let grads = model.backward(&basis, &labels, &mask).unwrap();
        for g in &grads.adu {
            assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
            assert!(g.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn total_is_semi_plus_lambda_sim() {
        let (x, basis, labels, mask) = instance(8, 4, 7);
        let config = AmaGcnConfig {
            lambda: 2.5,
            ..Default::default()
        };
        let model = AmaGcn::new(&config, 4, 2, 2).unwrap();
        let l = model.loss_at(&x, &basis, &labels, &mask, true).unwrap();
        assert_eq!(l.total, l.semi + 2.5 * l.sim);
        assert!(l.sim > 0.0 && l.sim < 1.0);
    }

    #[test]
    fn tensors_cover_parameters_and_moments() {
        let config = AmaGcnConfig::default();
        let mut p = ModelParams::init(&config, 8, 2, 0);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names[0], "mla.0.w0");
        assert!(names.iter().any(|n| n == "adam_adu.v.1.bias"));
        assert_eq!(names.len(), p.tensors_mut().len());
        // 5 GC layers x (4 + 1) + head (1 + 1) + 2 ADU x (4 + 1) = 37 per group set
        assert_eq!(p.trainable_mut().len(), 37);
    }
}
