//! Deterministic tensor math, reverse-mode autodiff, layers and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{dense_forward, lora_forward, DenseLayer, LoraAdapter};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{Param, ParamStore};
pub use rng::RngHandle;
pub use tensor::Tensor;

/// Mean-over-batch MSE of two tensors, without building a graph.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> crate::Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = g.mse(p, t)?;
    Ok(g.value(l).data()[0])
}

/// Mean softmax cross-entropy of `logits` (n × C) against class ids.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> crate::Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.cross_entropy(z, labels)?;
    Ok(g.value(l).data()[0])
}
