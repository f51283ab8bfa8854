//! Minimal differentiable computation core: tape-based reverse mode over
//! `f32` tensors, dense layers, multi-head cross-attention, AdamW and the
//! warmup-cosine learning-rate schedule.

mod graph;
mod layers;
mod params;
mod schedule;

pub use graph::{AttnShape, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use layers::{Activation, CrossAttention, LayerNorm, Linear, Mlp};
pub use params::{AdamWConfig, ParamId, ParameterStore};
pub use schedule::LrSchedule;

pub(crate) use graph::softmax_in_place;

/// Row-wise softmax outside of any graph.
pub fn softmax_rows(x: &crate::tensor::Tensor) -> crate::tensor::Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}
