//! Dense layers and low-rank adapters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const DEFAULT_LORA_RANK: usize = 4;
pub const DEFAULT_LORA_ALPHA: f64 = 8.0;

/// `y = x·Wᵀ + b` with W: d_out × d_in.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub frozen: bool,
}

impl DenseLayer {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        if w.shape().len() != 2 || b.len() != w.shape()[0] {
            return Err(Error::shape("dense layer", w.shape(), b.shape()));
        }
        Ok(Self {
            w,
            b,
            frozen: false,
        })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_out, d_in]),
            b: Tensor::zeros(&[d_out]),
            frozen: false,
        }
    }

    /// Xavier-style Gaussian weights, zero bias.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        Self {
            w: Tensor::randn(&[d_out, d_in], std, rng),
            b: Tensor::zeros(&[d_out]),
            frozen: false,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[0]
    }

    /// Registers `{prefix}.w` and `{prefix}.b`.
    pub fn store(&self, params: &mut ParamStore, prefix: &str) {
        params.insert(format!("{prefix}.w"), self.w.clone(), self.frozen);
        params.insert(format!("{prefix}.b"), self.b.clone(), self.frozen);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&format!("{prefix}.w"), &self.w, !self.frozen);
        let b = g.param(&format!("{prefix}.b"), &self.b, !self.frozen);
        g.dense(x, w, b)
    }
}

/// Low-rank residual `(alpha / r) · B · A` added to a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || b.shape()[1] != a.shape()[0] {
            return Err(Error::shape("lora adapter", a.shape(), b.shape()));
        }
        let (r, d_in, d_out) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        if r > d_in.min(d_out) {
            return Err(Error::InvalidInput(format!(
                "lora rank {r} exceeds min(d_in={d_in}, d_out={d_out})"
            )));
        }
        if !(alpha >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "lora alpha {alpha} must be non-negative"
            )));
        }
        Ok(Self { a, b, alpha })
    }

    /// A is Gaussian and B is zero, so a fresh adapter contributes nothing.
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let a = Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng);
        Self::new(a, Tensor::zeros(&[d_out, rank]), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn check_matches(&self, layer: &DenseLayer) -> Result<()> {
        if self.a.shape()[1] != layer.d_in() || self.b.shape()[0] != layer.d_out() {
            return Err(Error::shape(
                "lora_forward",
                layer.w.shape(),
                &[self.b.shape()[0], self.a.shape()[1]],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var, layer: &DenseLayer, prefix: &str) -> Result<Var> {
        self.check_matches(layer)?;
        let w = g.param(&format!("{prefix}.w"), &layer.w, !layer.frozen);
        let b = g.param(&format!("{prefix}.b"), &layer.b, !layer.frozen);
        let a = g.param(&format!("{prefix}.lora_a"), &self.a, true);
        let bb = g.param(&format!("{prefix}.lora_b"), &self.b, true);
        g.lora_dense(x, w, b, a, bb, self.scale())
    }
}

/// Graph-free dense forward for callers that only need values.
pub fn dense_forward(x: &Tensor, layer: &DenseLayer) -> Result<Tensor> {
    if x.cols() != layer.d_in() {
        return Err(Error::shape("dense_forward", x.shape(), layer.w.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, xv, "dense")?;
    Ok(g.value(y).clone())
}

/// Graph-free LoRA forward.
pub fn lora_forward(x: &Tensor, layer: &DenseLayer, adapter: &LoraAdapter) -> Result<Tensor> {
    if x.cols() != layer.d_in() {
        return Err(Error::shape("lora_forward", x.shape(), layer.w.shape()));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = adapter.forward(&mut g, xv, layer, "dense")?;
    Ok(g.value(y).clone())
}

/// Binds `{prefix}.w/.b` (plus `.lora_a/.lora_b` when stored) and applies the layer.
pub fn bound_dense(
    g: &mut Graph,
    params: &ParamStore,
    x: Var,
    prefix: &str,
    lora_alpha: f64,
) -> Result<Var> {
    let w = params.bind(g, &format!("{prefix}.w"))?;
    let b = params.bind(g, &format!("{prefix}.b"))?;
    let a_name = format!("{prefix}.lora_a");
    if params.contains(&a_name) {
        let a = params.bind(g, &a_name)?;
        let bb = params.bind(g, &format!("{prefix}.lora_b"))?;
        let rank = params.get(&a_name)?.shape()[0];
        g.lora_dense(x, w, b, a, bb, lora_alpha / rank as f64)
    } else {
        g.dense(x, w, b)
    }
}
