//! Client and server halves of the split exchange.
//!
//! One training step is
//!
//! ```text
//! client.forward  -> ActivationMessage        -> server.forward
//! server.forward  -> RepresentationMessage    -> client.loss_backward
//! client.loss_backward -> GradientMessage::Representation -> server.backward
//! server.backward -> GradientMessage::Symbols -> client.update
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::federation::messages::{
    ActivationMessage, GradientMessage, RepresentationMessage, UpdateMessage,
};
use crate::model::{
    device_forward, gather_symbols, heads_and_loss, make_batch, scatter_symbols, server_forward,
    DeviceForward, LabeledSample, ModelDims, Targets, TaskId, TxCondition, TX_WIDTH,
};
use crate::nn::{Gradients, Graph, Optimizer, OptimizerConfig, ParamStore, Tensor, Var};
use crate::transmission::{RateAllocation, SEMANTIC_DIM};

struct DeviceTape {
    graph: Graph,
    fwd: DeviceForward,
    targets: Targets,
    ids: Vec<u64>,
    head_grads: Option<Gradients>,
}

/// Losses observed by a client on one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub loss: f64,
    pub per_task: Vec<(TaskId, f64)>,
}

/// Device-side state: parameters, optimizer, local data and the tape of
/// the step in flight. Labels stay inside this struct.
pub struct Client {
    pub id: u32,
    pub params: ParamStore,
    dims: ModelDims,
    optimizer: Optimizer,
    data: Vec<LabeledSample>,
    tape: Option<DeviceTape>,
}

impl Client {
    pub fn new(
        id: u32,
        params: ParamStore,
        dims: ModelDims,
        optimizer: OptimizerConfig,
        data: Vec<LabeledSample>,
    ) -> Result<Self> {
        Ok(Self {
            id,
            params,
            dims,
            optimizer: Optimizer::new(optimizer)?,
            data,
            tape: None,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    /// Runs the transmitter on the selected local samples. `conds` decides,
    /// per sample, whether the link adds channel noise.
    pub fn forward(
        &mut self,
        indices: &[usize],
        conds: &[TxCondition],
    ) -> Result<ActivationMessage> {
        if let Some(&i) = indices.iter().find(|i| **i >= self.data.len()) {
            return Err(Error::InvalidInput(format!(
                "sample index {i} beyond {} local samples",
                self.data.len()
            )));
        }
        let samples: Vec<&LabeledSample> = indices.iter().map(|i| &self.data[*i]).collect();
        let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
        let (rows, targets) = make_batch(samples)?;
        let mut graph = Graph::new();
        let fwd = device_forward(&mut graph, &self.params, &self.dims, &rows, conds)?;
        let rx = graph.value(fwd.rx);
        let symbols = fwd
            .allocs
            .iter()
            .enumerate()
            .map(|(i, a)| gather_symbols(rx.row(i), a))
            .collect::<Result<Vec<_>>>()?;
        let msg = ActivationMessage {
            sample_ids: ids.clone(),
            allocs: fwd.allocs.clone(),
            erased: fwd.erased.clone(),
            symbols,
        };
        self.tape = Some(DeviceTape {
            graph,
            fwd,
            targets,
            ids,
            head_grads: None,
        });
        Ok(msg)
    }

    /// Computes the multi-task loss on the returned representation and the
    /// gradient at that boundary. Head gradients are kept for [`Self::update`].
    pub fn loss_backward(
        &mut self,
        msg: &RepresentationMessage,
        tasks: &[TaskId],
    ) -> Result<(GradientMessage, StepLosses)> {
        let tape = self
            .tape
            .as_mut()
            .ok_or_else(|| Error::Protocol("representation before activation".into()))?;
        if msg.sample_ids != tape.ids || msg.rep.shape() != [tape.ids.len(), SEMANTIC_DIM] {
            return Err(Error::Protocol(
                "representation does not match the batch in flight".into(),
            ));
        }
        let mut g = Graph::new();
        let rep = g.leaf(msg.rep.clone().with_requires_grad(true));
        let parts = heads_and_loss(&mut g, &self.params, &self.dims, rep, tasks, &tape.targets)?;
        let loss = g.value(parts.loss).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = g.backward(parts.loss)?;
        let grad = match grads.get(rep) {
            Some(d) => Tensor::new(msg.rep.shape().to_vec(), d.to_vec())?,
            None => Tensor::zeros(msg.rep.shape()),
        };
        let per_task = parts
            .per_task
            .iter()
            .map(|(t, v)| (*t, g.value(*v).data()[0]))
            .collect();
        tape.head_grads = Some(grads);
        Ok((
            GradientMessage::Representation {
                sample_ids: tape.ids.clone(),
                grad,
            },
            StepLosses { loss, per_task },
        ))
    }

    /// Finishes backpropagation through the channel and the encoders, then
    /// steps the optimizer over every trainable device-side tensor.
    pub fn update(&mut self, msg: &GradientMessage) -> Result<()> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Protocol("gradient without a forward tape".into()))?;
        let GradientMessage::Symbols { sample_ids, grad } = msg else {
            return Err(Error::Protocol("client expects a symbol gradient".into()));
        };
        let head_grads = tape
            .head_grads
            .ok_or_else(|| Error::Protocol("symbol gradient before loss".into()))?;
        if *sample_ids != tape.ids || grad.len() != tape.ids.len() {
            return Err(Error::Protocol(
                "symbol gradient does not match the batch in flight".into(),
            ));
        }
        let seed = symbol_grad_to_tensor(grad, &tape.fwd.allocs)?;
        let enc_grads = tape.graph.backward_from(&[(tape.fwd.rx, seed)])?;
        self.params.zero_grad();
        self.params.accumulate(&head_grads)?;
        self.params.accumulate(&enc_grads)?;
        self.optimizer.step(&mut self.params)?;
        self.params.zero_grad();
        Ok(())
    }

    pub fn update_message(&self) -> UpdateMessage {
        UpdateMessage {
            client_id: self.id,
            sample_count: self.data.len() as u64,
            tensors: self.params.trainable(),
        }
    }

    /// Installs aggregated global parameters. Optimizer moments are kept.
    pub fn load_global(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.params
            .load_values(tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

fn symbol_grad_to_tensor(grad: &[Vec<f64>], allocs: &[RateAllocation]) -> Result<Tensor> {
    let mut data = vec![0.0; allocs.len() * TX_WIDTH];
    for (i, (g, a)) in grad.iter().zip(allocs).enumerate() {
        if g.len() != 2 * a.symbols() {
            return Err(Error::AllocationMismatch(format!(
                "sample {i}: gradient has {} reals for {} symbols",
                g.len(),
                a.symbols()
            )));
        }
        let mut blocks = Vec::with_capacity(a.s.len());
        let mut off = 0;
        for s in a.s {
            let n = 2 * s as usize;
            blocks.push(crate::channel::ComplexSymbolBlock::from_reals(
                &g[off..off + n],
            )?);
            off += n;
        }
        scatter_symbols(&blocks, a, &mut data[i * TX_WIDTH..(i + 1) * TX_WIDTH])?;
    }
    Tensor::matrix(allocs.len(), TX_WIDTH, data)
}

struct ServerTape {
    graph: Graph,
    rx: Var,
    rep: Var,
    ids: Vec<u64>,
    allocs: Vec<RateAllocation>,
}

/// Server-side state held for one client: its replica of the receiver
/// parameters, the matching optimizer and the tape of the step in flight.
pub struct ServerReplica {
    pub params: ParamStore,
    dims: ModelDims,
    optimizer: Optimizer,
    tape: Option<ServerTape>,
}

impl ServerReplica {
    pub fn new(params: ParamStore, dims: ModelDims, optimizer: OptimizerConfig) -> Result<Self> {
        Ok(Self {
            params,
            dims,
            optimizer: Optimizer::new(optimizer)?,
            tape: None,
        })
    }

    /// JSC decoding and fusion decoding of the received symbols.
    pub fn forward(&mut self, msg: &ActivationMessage) -> Result<RepresentationMessage> {
        msg.validate()?;
        let n = msg.sample_ids.len();
        let mut data = vec![0.0; n * TX_WIDTH];
        for (i, (blocks, a)) in msg.symbols.iter().zip(&msg.allocs).enumerate() {
            scatter_symbols(blocks, a, &mut data[i * TX_WIDTH..(i + 1) * TX_WIDTH])?;
        }
        let mut graph = Graph::new();
        let rx = graph.leaf(Tensor::matrix(n, TX_WIDTH, data)?.with_requires_grad(true));
        let (_, rep) = server_forward(
            &mut graph,
            &self.params,
            &self.dims,
            rx,
            &msg.allocs,
            &msg.erased,
        )?;
        let out = RepresentationMessage {
            sample_ids: msg.sample_ids.clone(),
            rep: graph.value(rep).clone(),
        };
        self.tape = Some(ServerTape {
            graph,
            rx,
            rep,
            ids: msg.sample_ids.clone(),
            allocs: msg.allocs.clone(),
        });
        Ok(out)
    }

    /// Backpropagates the client's boundary gradient, steps the replica and
    /// returns the gradient at the sent symbols.
    pub fn backward(&mut self, msg: &GradientMessage) -> Result<GradientMessage> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::Protocol("gradient without a server tape".into()))?;
        let GradientMessage::Representation { sample_ids, grad } = msg else {
            return Err(Error::Protocol(
                "server expects a representation gradient".into(),
            ));
        };
        if *sample_ids != tape.ids || grad.shape() != tape.graph.value(tape.rep).shape() {
            return Err(Error::Protocol(
                "representation gradient does not match the batch in flight".into(),
            ));
        }
        if !msg.is_finite() {
            return Err(Error::NonFinite("representation gradient".into()));
        }
        let grads = if tape.graph.requires_grad(tape.rep) {
            Some(tape.graph.backward_from(&[(tape.rep, grad.clone())])?)
        } else {
            None
        };
        let rx_grad = grads.as_ref().and_then(|g| g.get(tape.rx));
        let zero_row = [0.0; TX_WIDTH];
        let symbols = tape
            .allocs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let row = rx_grad.map_or(&zero_row[..], |d| &d[i * TX_WIDTH..(i + 1) * TX_WIDTH]);
                Ok(gather_symbols(row, a)?
                    .iter()
                    .flat_map(|b| b.to_reals())
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        if let Some(g) = &grads {
            self.params.zero_grad();
            self.params.accumulate(g)?;
            self.optimizer.step(&mut self.params)?;
            self.params.zero_grad();
        }
        Ok(GradientMessage::Symbols {
            sample_ids: tape.ids,
            grad: symbols,
        })
    }

    pub fn load_global(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.params
            .load_values(tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelState;
    use crate::model::AllocPolicy;
    use crate::model::{ModalitySample, ModelBundle, IMAGE_PIXELS};
    use crate::nn::RngHandle;

    fn data(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample {
                id: 100 + i as u64,
                inputs: vec![
                    ModalitySample::Image(
                        (0..IMAGE_PIXELS)
                            .map(|k| ((k + 3 * i) % 11) as f64 / 10.0)
                            .collect(),
                    ),
                    ModalitySample::Text(vec![1 + i % 4, 9 + i, 17]),
                    ModalitySample::Audio(
                        (0..64)
                            .map(|t| 0.5 * ((t * (i + 1)) as f64 * 0.3).sin())
                            .collect(),
                    ),
                ],
                class: i % 10,
                answer: (i + 4) % 10,
                caption: vec![5 + i, 7, 60, 61, 0, 0, 0, 0],
            })
            .collect()
    }

    fn setup() -> (ModelBundle, Client, ServerReplica) {
        let mut b = ModelBundle::init(ModelDims::default(), &RngHandle::new(5, 0));
        b.attach_lora(&RngHandle::new(5, 1)).unwrap();
        let opt = OptimizerConfig::adam(0.01);
        let c = Client::new(0, b.device.clone(), b.dims.clone(), opt, data(6)).unwrap();
        let s = ServerReplica::new(b.server.clone(), b.dims.clone(), opt).unwrap();
        (b, c, s)
    }

    #[test]
    fn noiseless_message_is_clean_jsc_output() {
        let (b, mut c, _) = setup();
        let conds = vec![TxCondition::noiseless(12, AllocPolicy::Importance); 3];
        let msg = c.forward(&[0, 2, 4], &conds).unwrap();
        let (rows, _) = make_batch(&data(6)[..1]).unwrap();
        let out = crate::model::forward_pipeline(&b, &rows, &[], &conds[..1], &Default::default())
            .unwrap();
        let sv = crate::model::SemanticVector::new(out.sv.row(0).to_vec(), out.masks[0]).unwrap();
        let clean = crate::model::jsc_encode(&sv, &msg.allocs[0], &b).unwrap();
        assert_eq!(msg.symbols[0], clean);
        assert_eq!(msg.sample_ids, vec![100, 102, 104]);
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let (_, mut c, mut s) = setup();
        let link = ChannelState::new(0.0, 3.0, RngHandle::new(9, 9)).unwrap();
        let conds: Vec<_> = (0..2)
            .map(|i| TxCondition::over(link.for_transmission(i), 10, AllocPolicy::Importance))
            .collect();
        let a = c.forward(&[1, 3], &conds).unwrap();
        let b = c.forward(&[1, 3], &conds).unwrap();
        assert_eq!(a.encode(), b.encode());
        let r1 = s.forward(&a).unwrap();
        let r2 = s.forward(&b).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.rep.shape(), &[2, 32]);
    }

    #[test]
    fn zero_allocation_gives_input_independent_response() {
        let (_, mut c, mut s) = setup();
        let conds = vec![TxCondition::noiseless(0, AllocPolicy::Uniform); 2];
        let a = s.forward(&c.forward(&[0, 1], &conds).unwrap()).unwrap();
        let b = s.forward(&c.forward(&[4, 5], &conds).unwrap()).unwrap();
        assert_eq!(a.rep, b.rep);
    }

    #[test]
    fn zero_representation_gradient_gives_zero_symbol_gradient() {
        let (_, mut c, mut s) = setup();
        let before = s.params.clone();
        let conds = vec![TxCondition::noiseless(16, AllocPolicy::Uniform); 2];
        s.forward(&c.forward(&[0, 1], &conds).unwrap()).unwrap();
        let g = GradientMessage::Representation {
            sample_ids: vec![100, 101],
            grad: Tensor::zeros(&[2, 32]),
        };
        let GradientMessage::Symbols { grad, .. } = s.backward(&g).unwrap() else {
            panic!()
        };
        assert!(grad.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(grad[0].len(), 32);
        assert_eq!(s.params.max_abs_diff(&before), 0.0);
    }

    #[test]
    fn zero_symbol_gradient_changes_only_heads() {
        let (_, mut c, mut s) = setup();
        let conds = vec![TxCondition::noiseless(16, AllocPolicy::Uniform); 2];
        let rep = s.forward(&c.forward(&[0, 1], &conds).unwrap()).unwrap();
        c.loss_backward(&rep, &[TaskId::Classify]).unwrap();
        let before = c.params.clone();
        let zero = GradientMessage::Symbols {
            sample_ids: vec![100, 101],
            grad: vec![vec![0.0; 32]; 2],
        };
        c.update(&zero).unwrap();
        for (name, p) in c.params.iter() {
            let same = p.tensor == *before.get(name).unwrap();
            assert_eq!(same, !name.starts_with("head.classify"), "{name}");
        }
    }

    #[test]
    fn split_gradients_match_composite_autodiff() {
        let (b, mut c, mut s) = setup();
        let tasks = TaskId::ALL;
        let conds = vec![TxCondition::noiseless(12, AllocPolicy::Importance); 3];
        let rep = s.forward(&c.forward(&[0, 1, 2], &conds).unwrap()).unwrap();
        let (gmsg, _) = c.loss_backward(&rep, &tasks).unwrap();

        let (rows, targets) = make_batch(&data(6)[..3]).unwrap();
        let mut g = Graph::new();
        let df = device_forward(&mut g, &b.device, &b.dims, &rows, &conds).unwrap();
        let (_, rep_var) =
            server_forward(&mut g, &b.server, &b.dims, df.rx, &df.allocs, &df.erased).unwrap();
        let lp = heads_and_loss(&mut g, &b.device, &b.dims, rep_var, &tasks, &targets).unwrap();
        let grads = g.backward(lp.loss).unwrap();

        let GradientMessage::Representation { grad, .. } = &gmsg else {
            panic!()
        };
        let oracle = grads.get(rep_var).unwrap();
        assert!(grad
            .data()
            .iter()
            .zip(oracle)
            .all(|(a, o)| (a - o).abs() < 1e-10));

        let sym = s.backward(&gmsg).unwrap();
        let GradientMessage::Symbols { grad: sg, .. } = &sym else {
            panic!()
        };
        let rx_oracle = grads.get(df.rx).unwrap();
        for (i, a) in df.allocs.iter().enumerate() {
            let want: Vec<f64> = gather_symbols(&rx_oracle[i * TX_WIDTH..(i + 1) * TX_WIDTH], a)
                .unwrap()
                .iter()
                .flat_map(|b| b.to_reals())
                .collect();
            assert!(sg[i].iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }

    #[test]
    fn frozen_base_untouched_and_out_of_order_messages_rejected() {
        let (_, mut c, mut s) = setup();
        let before = (c.params.clone(), s.params.clone());
        let bad = GradientMessage::Symbols {
            sample_ids: vec![],
            grad: vec![],
        };
        assert!(matches!(c.update(&bad), Err(Error::Protocol(_))));
        let conds = vec![TxCondition::noiseless(16, AllocPolicy::Importance); 2];
        for _ in 0..2 {
            let rep = s.forward(&c.forward(&[2, 3], &conds).unwrap()).unwrap();
            let (g, _) = c.loss_backward(&rep, &TaskId::ALL).unwrap();
            let sg = s.backward(&g).unwrap();
            c.update(&sg).unwrap();
        }
        for n in ["fusion.enc.l1.w", "fusion.enc.l2.b"] {
            assert_eq!(c.params.get(n).unwrap(), before.0.get(n).unwrap());
        }
        for n in ["fusion.dec.l1.w", "fusion.dec.l2.w"] {
            assert_eq!(s.params.get(n).unwrap(), before.1.get(n).unwrap());
        }
        let u = c.update_message();
        assert!(!u.tensors.contains_key("fusion.enc.l1.w"));
        assert!(u.tensors.contains_key("fusion.enc.l1.lora_a"));
    }
}
