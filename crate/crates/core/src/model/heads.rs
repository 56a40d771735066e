//! Fusion decoder and task heads.

use crate::error::{Error, Result};
use crate::model::bundle::FUSION_DECODER;
use crate::model::{
    ModelBundle, Net, Targets, TaskId, CAPTION_SLOTS, FEATURE_DIM, SEMANTIC_DIM, VOCAB,
};
use crate::nn::{Graph, Tensor, Var};

pub(crate) fn fusion_decode_graph(g: &mut Graph, net: Net, sv_hat: Var) -> Result<Var> {
    let h = net.dense_tanh(g, sv_hat, FUSION_DECODER[0])?;
    net.dense_tanh(g, h, FUSION_DECODER[1])
}

/// Head output for a batch of representations. Reconstruction is squashed
/// into [0, 1]; caption logits stay n × 512 (8 slots × 64 tokens).
pub(crate) fn head_graph(g: &mut Graph, net: Net, rep: Var, task: TaskId) -> Result<Var> {
    let head = task.head();
    if !net.p.contains(&format!("{head}.w")) {
        return Err(Error::InvalidInput(format!(
            "no decoder registered for task {}",
            task.name()
        )));
    }
    let y = net.dense(g, rep, &head)?;
    Ok(match task {
        TaskId::Reconstruct => g.sigmoid(y),
        _ => y,
    })
}

pub(crate) fn task_loss(g: &mut Graph, task: TaskId, out: Var, targets: &Targets) -> Result<Var> {
    match task {
        TaskId::Classify => g.cross_entropy(out, &targets.class),
        TaskId::Vqa => g.cross_entropy(out, &targets.answer),
        TaskId::Reconstruct => {
            let t = g.constant(targets.image.clone());
            g.mse(out, t)
        }
        TaskId::Caption => {
            let n = g.value(out).rows();
            let slots = g.reshape(out, vec![n * CAPTION_SLOTS, VOCAB])?;
            g.cross_entropy(slots, &targets.caption)
        }
    }
}

/// Receiver-side fusion decoder on one semantic estimate.
pub fn fusion_decode(sv_hat: &[f64], bundle: &ModelBundle) -> Result<Vec<f64>> {
    if sv_hat.len() != SEMANTIC_DIM {
        return Err(Error::shape(
            "fusion_decode",
            &[sv_hat.len()],
            &[SEMANTIC_DIM],
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, SEMANTIC_DIM, sv_hat.to_vec())?);
    let y = fusion_decode_graph(&mut g, Net::new(&bundle.server, &bundle.dims), x)?;
    Ok(g.value(y).data().to_vec())
}

/// One head applied to one representation.
pub fn task_decode(rep: &[f64], task: TaskId, bundle: &ModelBundle) -> Result<Tensor> {
    if rep.len() != FEATURE_DIM {
        return Err(Error::shape("task_decode", &[rep.len()], &[FEATURE_DIM]));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, FEATURE_DIM, rep.to_vec())?);
    let y = head_graph(&mut g, Net::new(&bundle.device, &bundle.dims), x, task)?;
    let out = g.value(y).clone();
    match task {
        TaskId::Caption => out.reshaped(vec![CAPTION_SLOTS, VOCAB]),
        _ => Ok(out),
    }
}
