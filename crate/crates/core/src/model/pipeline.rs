//! End-to-end forward passes and the monolithic training step.

use std::collections::BTreeMap;

use crate::channel::ChannelState;
use crate::error::{Error, Result};
use crate::model::encoders::{encode_rows, fuse};
use crate::model::heads::{fusion_decode_graph, head_graph, task_loss};
use crate::model::jsc::{channel_perturbation, decode_tiers, encode_all_tiers};
use crate::model::{ModalitySample, ModelBundle, ModelDims, Net, SourceMask, Targets, TaskId};
use crate::nn::{Graph, Optimizer, ParamStore, Tensor, Var};
use crate::rag::Augmenter;
use crate::transmission::{
    allocate_rates, allocate_uniform, score_importance, ImportanceScores, RateAllocation,
};

#[derive(Clone, Debug, PartialEq)]
pub enum AllocPolicy {
    Importance,
    Uniform,
    Fixed(RateAllocation),
}

/// How one sample is sent: symbol budget, allocation rule and link.
/// A `None` link is an ideal channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TxCondition {
    pub budget: usize,
    pub policy: AllocPolicy,
    pub link: Option<ChannelState>,
}

impl TxCondition {
    pub fn noiseless(budget: usize, policy: AllocPolicy) -> Self {
        Self {
            budget,
            policy,
            link: None,
        }
    }

    pub fn over(link: ChannelState, budget: usize, policy: AllocPolicy) -> Self {
        Self {
            budget,
            policy,
            link: Some(link),
        }
    }

    fn allocate(&self, scores: &ImportanceScores) -> RateAllocation {
        match &self.policy {
            AllocPolicy::Importance => {
                let snr = self.link.map_or(f64::INFINITY, |l| l.snr_db);
                allocate_rates(scores, snr, self.budget)
            }
            AllocPolicy::Uniform => allocate_uniform(self.budget),
            AllocPolicy::Fixed(a) => a.clone(),
        }
    }
}

/// Graph handles and side information produced on the transmitter.
#[derive(Debug)]
pub struct DeviceForward {
    pub sv: Var,
    pub tx: Var,
    /// Receiver-side estimate of `tx`; equal to `tx` on ideal links.
    pub rx: Var,
    pub masks: Vec<SourceMask>,
    pub scores: Vec<ImportanceScores>,
    pub allocs: Vec<RateAllocation>,
    pub erased: Vec<bool>,
    pub transmissions: usize,
}

fn device_forward_with(
    g: &mut Graph,
    net: Net,
    rows: &[Vec<ModalitySample>],
    conds: &[TxCondition],
    rag: Option<&Augmenter>,
) -> Result<DeviceForward> {
    if rows.len() != conds.len() {
        return Err(Error::shape(
            "device_forward",
            &[rows.len()],
            &[conds.len()],
        ));
    }
    let (x, masks) = encode_rows(g, net, rows)?;
    let mut sv = fuse(g, net, x)?;
    if let Some(aug) = rag {
        if let Some(t) = aug.apply_rows(g.value(sv))? {
            sv = g.constant(t);
        }
    }
    let svv = g.value(sv);
    let mut scores = Vec::with_capacity(rows.len());
    let mut allocs = Vec::with_capacity(rows.len());
    for (i, c) in conds.iter().enumerate() {
        let s = score_importance(svv.row(i))?;
        allocs.push(c.allocate(&s));
        scores.push(s);
    }
    let tx = encode_all_tiers(g, net, sv)?;
    let links: Vec<Option<ChannelState>> = conds.iter().map(|c| c.link).collect();
    let transmissions = links.iter().filter(|l| l.is_some()).count();
    let (noise, erased) = channel_perturbation(g.value(tx), &allocs, &links)?;
    let rx = if noise.max_abs() == 0.0 {
        tx
    } else {
        let nv = g.constant(noise);
        g.add(tx, nv)?
    };
    Ok(DeviceForward {
        sv,
        tx,
        rx,
        masks,
        scores,
        allocs,
        erased,
        transmissions,
    })
}

/// Transmitter half: encoders, fusion, importance scoring, allocation, JSC
/// encoding and the channel. Noise enters as an additive constant so
/// gradients pass straight through it.
pub fn device_forward(
    g: &mut Graph,
    device: &ParamStore,
    dims: &ModelDims,
    rows: &[Vec<ModalitySample>],
    conds: &[TxCondition],
) -> Result<DeviceForward> {
    device_forward_with(g, Net::new(device, dims), rows, conds, None)
}

/// Receiver half: JSC decoding then the fusion decoder.
pub fn server_forward(
    g: &mut Graph,
    server: &ParamStore,
    dims: &ModelDims,
    rx: Var,
    allocs: &[RateAllocation],
    erased: &[bool],
) -> Result<(Var, Var)> {
    let net = Net::new(server, dims);
    let sv_hat = decode_tiers(g, net, rx, allocs, erased)?;
    let rep = fusion_decode_graph(g, net, sv_hat)?;
    Ok((sv_hat, rep))
}

#[derive(Debug)]
pub struct LossParts {
    /// Unweighted mean of the per-task losses.
    pub loss: Var,
    pub per_task: Vec<(TaskId, Var)>,
    pub outputs: Vec<(TaskId, Var)>,
}

pub fn heads_and_loss(
    g: &mut Graph,
    device: &ParamStore,
    dims: &ModelDims,
    rep: Var,
    tasks: &[TaskId],
    targets: &Targets,
) -> Result<LossParts> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no tasks requested".into()));
    }
    let net = Net::new(device, dims);
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut outputs = Vec::with_capacity(tasks.len());
    let mut total: Option<Var> = None;
    for &t in tasks {
        let out = head_graph(g, net, rep, t)?;
        let l = task_loss(g, t, out, targets)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
        outputs.push((t, out));
        per_task.push((t, l));
    }
    let loss = g.scale(total.expect("tasks non-empty"), 1.0 / tasks.len() as f64);
    Ok(LossParts {
        loss,
        per_task,
        outputs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub task_losses: Vec<(TaskId, f64)>,
    pub symbols: usize,
}

/// One optimisation step of the un-split model: device and server
/// parameters are updated from a single backward pass.
pub fn composite_step(
    bundle: &mut ModelBundle,
    device_opt: &mut Optimizer,
    server_opt: &mut Optimizer,
    rows: &[Vec<ModalitySample>],
    targets: &Targets,
    tasks: &[TaskId],
    conds: &[TxCondition],
) -> Result<StepReport> {
    let mut g = Graph::new();
    let df = device_forward(&mut g, &bundle.device, &bundle.dims, rows, conds)?;
    let (_, rep) = server_forward(
        &mut g,
        &bundle.server,
        &bundle.dims,
        df.rx,
        &df.allocs,
        &df.erased,
    )?;
    let lp = heads_and_loss(&mut g, &bundle.device, &bundle.dims, rep, tasks, targets)?;
    let loss = g.value(lp.loss).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(lp.loss)?;
    bundle.device.zero_grad();
    bundle.server.zero_grad();
    bundle.device.accumulate(&grads)?;
    bundle.server.accumulate(&grads)?;
    device_opt.step(&mut bundle.device)?;
    server_opt.step(&mut bundle.server)?;
    bundle.device.zero_grad();
    bundle.server.zero_grad();
    Ok(StepReport {
        loss,
        task_losses: lp
            .per_task
            .iter()
            .map(|(t, v)| (*t, g.value(*v).data()[0]))
            .collect(),
        symbols: df.allocs.iter().map(RateAllocation::symbols).sum(),
    })
}

/// Optional knowledge-base augmentation at either end of the link.
#[derive(Clone, Copy, Default)]
pub struct PipelineOptions<'a> {
    /// Applied to the fusion encoder output before scoring and encoding.
    pub transmitter: Option<Augmenter<'a>>,
    /// Applied to the fusion decoder output before the task heads.
    pub receiver: Option<Augmenter<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub sv: Tensor,
    pub sv_hat: Tensor,
    pub rep: Tensor,
    pub masks: Vec<SourceMask>,
    pub scores: Vec<ImportanceScores>,
    pub allocs: Vec<RateAllocation>,
    pub erased: Vec<bool>,
    /// Complex symbols emitted per sample.
    pub symbols: Vec<usize>,
    /// Channel transmissions made for the whole batch.
    pub transmissions: usize,
    pub outputs: BTreeMap<TaskId, Tensor>,
}

/// Full inference: every requested task is served from the same received
/// semantic estimate.
pub fn forward_pipeline(
    bundle: &ModelBundle,
    rows: &[Vec<ModalitySample>],
    tasks: &[TaskId],
    conds: &[TxCondition],
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let mut g = Graph::new();
    let dnet = Net::new(&bundle.device, &bundle.dims);
    let df = device_forward_with(&mut g, dnet, rows, conds, opts.transmitter.as_ref())?;
    let (sv_hat, mut rep) = server_forward(
        &mut g,
        &bundle.server,
        &bundle.dims,
        df.rx,
        &df.allocs,
        &df.erased,
    )?;
    if let Some(aug) = &opts.receiver {
        if let Some(t) = aug.apply_rows(g.value(rep))? {
            rep = g.constant(t);
        }
    }
    let mut outputs = BTreeMap::new();
    for &t in tasks {
        let y = head_graph(&mut g, dnet, rep, t)?;
        outputs.insert(t, g.value(y).clone());
    }
    Ok(PipelineOutput {
        sv: g.value(df.sv).clone(),
        sv_hat: g.value(sv_hat).clone(),
        rep: g.value(rep).clone(),
        masks: df.masks,
        scores: df.scores,
        symbols: df.allocs.iter().map(RateAllocation::symbols).collect(),
        allocs: df.allocs,
        erased: df.erased,
        transmissions: df.transmissions,
        outputs,
    })
}
