//! Fixed-architecture neural network pieces with hand-written reverse passes:
//! Chebyshev graph convolutions, dense layers, aggregation, losses and Adam.

mod adam;
mod layers;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{
    cheb_conv_backward, cheb_conv_forward, concat_aggregate, concat_backward, dense_backward, dense_forward, dropout,
    maxpool_aggregate, maxpool_backward, softmax, softmax_backward, Activation, LayerCache, LayerParams,
};
pub use loss::{
    cross_entropy_logit_grad, cross_entropy_masked, similarity_loss, similarity_loss_grad, total_loss, LossTerms,
};
