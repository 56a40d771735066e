//! Round orchestration: local split steps, aggregation and redistribution.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelState, DEFAULT_K_FACTOR};
use crate::error::{Error, Result};
use crate::federation::aggregate::{aggregate, validate_weights, weights_from_counts};
use crate::federation::messages::{
    encode_tensors, ActivationMessage, GradientMessage, MessageKind, RepresentationMessage,
    TraceRecord,
};
use crate::federation::protocol::{Client, ServerReplica, StepLosses};
use crate::model::{AllocPolicy, LabeledSample, ModelBundle, TaskId, TxCondition};
use crate::nn::{OptimizerConfig, RngHandle};
use crate::transmission::{MAX_BUDGET, SNR_HI_DB, SNR_LO_DB};

const FED_STREAM: u64 = 0x0066_6564;
const BATCH_TAG: u64 = 1;
const LINK_TAG: u64 = 2;

/// Per-client random streams: (batch selection, link conditions).
pub fn client_streams(seed: u64, client: u32) -> (RngHandle, RngHandle) {
    let base = RngHandle::new(seed, FED_STREAM).derive(client as u64);
    (base.derive(BATCH_TAG), base.derive(LINK_TAG))
}

/// Draws minibatches without replacement; step `t` uses its own substream.
#[derive(Clone, Copy, Debug)]
pub struct BatchSampler {
    rng: RngHandle,
    n: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(rng: RngHandle, n: usize, batch: usize) -> Self {
        Self { rng, n, batch }
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        let mut r = self.rng.derive(step).rng();
        let k = self.batch.min(self.n);
        for i in 0..k {
            let j = r.random_range(i..self.n);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Distribution of per-sample link conditions during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSampler {
    /// Inclusive SNR range in dB, sampled uniformly.
    pub snr_db: [f64; 2],
    /// Inclusive symbol budget range, sampled uniformly.
    pub budget: [usize; 2],
    /// Probability of importance-aware rather than uniform allocation.
    pub importance_prob: f64,
    pub k_factor: f64,
}

impl Default for LinkSampler {
    fn default() -> Self {
        Self {
            snr_db: [SNR_LO_DB, SNR_HI_DB],
            budget: [4, MAX_BUDGET],
            importance_prob: 0.5,
            k_factor: DEFAULT_K_FACTOR,
        }
    }
}

impl LinkSampler {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid snr range [{lo}, {hi}]")));
        }
        if self.budget[0] > self.budget[1] || self.budget[1] > MAX_BUDGET {
            return Err(Error::Config(format!(
                "invalid budget range {:?}",
                self.budget
            )));
        }
        if !(0.0..=1.0).contains(&self.importance_prob) {
            return Err(Error::Config(format!(
                "importance_prob {} outside [0, 1]",
                self.importance_prob
            )));
        }
        if !(self.k_factor >= 0.0) {
            return Err(Error::Config(format!(
                "k_factor {} must be non-negative",
                self.k_factor
            )));
        }
        Ok(())
    }

    /// Conditions for a batch of `n` samples at `step`. Without `noisy`
    /// the links are ideal but budgets and policies are still drawn.
    pub fn draw(
        &self,
        rng: &RngHandle,
        step: u64,
        n: usize,
        noisy: bool,
    ) -> Result<Vec<TxCondition>> {
        let h = rng.derive(step);
        let mut r = h.rng();
        (0..n)
            .map(|i| {
                let snr = self.snr_db[0] + (self.snr_db[1] - self.snr_db[0]) * r.random::<f64>();
                let budget = r.random_range(self.budget[0]..=self.budget[1]);
                let policy = if r.random::<f64>() < self.importance_prob {
                    AllocPolicy::Importance
                } else {
                    AllocPolicy::Uniform
                };
                Ok(if noisy {
                    TxCondition::over(
                        ChannelState::new(snr, self.k_factor, h.derive(i as u64))?,
                        budget,
                        policy,
                    )
                } else {
                    TxCondition::noiseless(budget, policy)
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub num_clients: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub train_with_channel_noise: bool,
    pub link: LinkSampler,
    /// Aggregation weights; proportional to local dataset sizes when absent.
    pub weights: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
    pub tasks: Vec<TaskId>,
    pub seed: u64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.local_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "clients, local steps and batch size must be at least 1".into(),
            ));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no training tasks".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.num_clients {
                return Err(Error::Config(format!(
                    "{} weights for {} clients",
                    w.len(),
                    self.num_clients
                )));
            }
            validate_weights(w)?;
        }
        self.link.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Mean training loss over all clients and local steps.
    pub loss: f64,
    pub task_losses: Vec<(TaskId, f64)>,
    /// Payload bytes of every message sent during the round.
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rounds: Vec<RoundLog>,
}

impl TrainLog {
    pub fn bytes_exchanged(&self) -> u64 {
        self.rounds.iter().map(|r| r.bytes).sum()
    }

    /// Long-format CSV: `round,metric,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["round", "metric", "value"])?;
        for r in &self.rounds {
            let round = r.round.to_string();
            out.write_record([round.as_str(), "loss", &r.loss.to_string()])?;
            for (t, l) in &r.task_losses {
                out.write_record([
                    round.as_str(),
                    &format!("loss_{}", t.name()),
                    &l.to_string(),
                ])?;
            }
            out.write_record([round.as_str(), "bytes", &r.bytes.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Bus {
    client: u32,
    round: u32,
    bytes: u64,
    records: Option<Vec<TraceRecord>>,
}

impl Bus {
    fn send(&mut self, kind: MessageKind, payload: Vec<u8>) -> Vec<u8> {
        self.bytes += payload.len() as u64;
        if let Some(r) = &mut self.records {
            r.push(TraceRecord {
                kind,
                client: self.client,
                round: self.round,
                payload: payload.clone(),
            });
        }
        payload
    }
}

/// Local steps of one client against its server replica. Every message is
/// serialised on the way out and parsed on the way in.
fn client_round(
    client: &mut Client,
    server: &mut ServerReplica,
    cfg: &RoundConfig,
    round: usize,
    bus: &mut Bus,
) -> Result<Vec<StepLosses>> {
    let (batch_rng, link_rng) = client_streams(cfg.seed, client.id);
    let sampler = BatchSampler::new(batch_rng, client.num_samples(), cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.local_steps);
    for e in 0..cfg.local_steps {
        let step = (round * cfg.local_steps + e) as u64;
        let idx = sampler.indices(step);
        let conds = cfg
            .link
            .draw(&link_rng, step, idx.len(), cfg.train_with_channel_noise)?;
        let act = client.forward(&idx, &conds)?;
        let act = ActivationMessage::decode(&bus.send(MessageKind::Activation, act.encode()))?;
        let rep = server.forward(&act)?;
        let rep =
            RepresentationMessage::decode(&bus.send(MessageKind::Representation, rep.encode()))?;
        let (g, l) = client.loss_backward(&rep, &cfg.tasks)?;
        let g = GradientMessage::decode(g.kind(), &bus.send(g.kind(), g.encode()))?;
        let sg = server.backward(&g)?;
        let sg = GradientMessage::decode(sg.kind(), &bus.send(sg.kind(), sg.encode()))?;
        client.update(&sg)?;
        losses.push(l);
    }
    Ok(losses)
}

/// Federated split fine-tuning from `init`. `data[k]` is client `k`'s local
/// dataset. Clients run concurrently; trace records are written in client
/// order so the file does not depend on scheduling.
pub fn run_training(
    cfg: &RoundConfig,
    init: &ModelBundle,
    data: Vec<Vec<LabeledSample>>,
    mut trace: Option<&mut dyn Write>,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if data.len() != cfg.num_clients {
        return Err(Error::Config(format!(
            "{} client datasets for {} clients",
            data.len(),
            cfg.num_clients
        )));
    }
    if let Some(k) = data.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("client {k} has no data")));
    }
    let weights = match &cfg.weights {
        Some(w) => w.clone(),
        None => weights_from_counts(&data.iter().map(|d| d.len() as u64).collect::<Vec<_>>())?,
    };
    let mut clients = data
        .into_iter()
        .enumerate()
        .map(|(k, d)| {
            Client::new(
                k as u32,
                init.device.clone(),
                init.dims.clone(),
                cfg.optimizer,
                d,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut servers = (0..cfg.num_clients)
        .map(|_| ServerReplica::new(init.server.clone(), init.dims.clone(), cfg.optimizer))
        .collect::<Result<Vec<_>>>()?;
    let mut log = TrainLog::default();
    if cfg.rounds == 0 {
        return Ok((init.clone(), log));
    }
    for round in 0..cfg.rounds {
        let tracing = trace.is_some();
        let results: Vec<(Bus, Result<Vec<StepLosses>>)> = clients
            .par_iter_mut()
            .zip(servers.par_iter_mut())
            .map(|(c, s)| {
                let mut bus = Bus {
                    client: c.id,
                    round: round as u32,
                    bytes: 0,
                    records: tracing.then(Vec::new),
                };
                let r = client_round(c, s, cfg, round, &mut bus);
                (bus, r)
            })
            .collect();
        let mut bytes = 0;
        let mut all_losses = Vec::new();
        let mut buses = Vec::with_capacity(results.len());
        for (bus, r) in results {
            all_losses.extend(r?);
            bytes += bus.bytes;
            buses.push(bus);
        }
        let updates: Vec<_> = clients.iter().map(Client::update_message).collect();
        for (u, bus) in updates.iter().zip(&mut buses) {
            bus.send(MessageKind::Update, u.encode());
        }
        let device_global = aggregate(
            &updates.iter().map(|u| &u.tensors).collect::<Vec<_>>(),
            &weights,
        )?;
        let server_models: Vec<_> = servers.iter().map(|s| s.params.trainable()).collect();
        let server_global = aggregate(&server_models.iter().collect::<Vec<_>>(), &weights)?;
        let broadcast = encode_tensors(&device_global);
        for bus in &mut buses {
            bus.send(MessageKind::Broadcast, broadcast.clone());
        }
        bytes += buses.iter().map(|b| b.bytes).sum::<u64>() - bytes;
        for c in &mut clients {
            c.load_global(&device_global)?;
        }
        for s in &mut servers {
            s.load_global(&server_global)?;
        }
        if let Some(w) = trace.as_mut() {
            for bus in &buses {
                for rec in bus.records.iter().flatten() {
                    rec.write_to(w)?;
                }
            }
        }
        log.rounds
            .push(round_log(round, &cfg.tasks, &all_losses, bytes));
    }
    let bundle = ModelBundle {
        dims: init.dims.clone(),
        device: clients.swap_remove(0).params,
        server: servers.swap_remove(0).params,
    };
    Ok((bundle, log))
}

fn round_log(round: usize, tasks: &[TaskId], losses: &[StepLosses], bytes: u64) -> RoundLog {
    let n = losses.len() as f64;
    let mut per_task: BTreeMap<TaskId, f64> = tasks.iter().map(|t| (*t, 0.0)).collect();
    for l in losses {
        for (t, v) in &l.per_task {
            *per_task.entry(*t).or_default() += v / n;
        }
    }
    RoundLog {
        round,
        loss: losses.iter().map(|l| l.loss).sum::<f64>() / n,
        task_losses: tasks.iter().map(|t| (*t, per_task[t])).collect(),
        bytes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::messages::read_trace;
    use crate::model::{composite_step, make_batch, ModalitySample, ModelDims, IMAGE_PIXELS};
    use crate::nn::Optimizer;

    fn data(n: usize, offset: u64) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| {
                let c = i % 10;
                LabeledSample {
                    id: offset + i as u64,
                    inputs: vec![
                        ModalitySample::Image(
                            (0..IMAGE_PIXELS)
                                .map(|k| if k % 10 == c { 0.9 } else { 0.1 })
                                .collect(),
                        ),
                        ModalitySample::Text(vec![1 + i % 4, 10 + c, 20 + c]),
                        ModalitySample::Audio(
                            (0..64)
                                .map(|t| ((t * (c + 1)) as f64 * 0.2).sin() * 0.5)
                                .collect(),
                        ),
                    ],
                    class: c,
                    answer: (c + 3) % 10,
                    caption: vec![10 + c, 20 + c, 30, 60, 0, 0, 0, 0],
                }
            })
            .collect()
    }

    fn bundle() -> ModelBundle {
        let mut b = ModelBundle::init(ModelDims::default(), &RngHandle::new(21, 0));
        b.attach_lora(&RngHandle::new(21, 1)).unwrap();
        b
    }

    fn config(clients: usize, rounds: usize, noisy: bool) -> RoundConfig {
        RoundConfig {
            num_clients: clients,
            local_steps: 1,
            rounds,
            batch_size: 4,
            train_with_channel_noise: noisy,
            link: LinkSampler::default(),
            weights: None,
            optimizer: OptimizerConfig::adam(0.005),
            tasks: TaskId::ALL.to_vec(),
            seed: 77,
        }
    }

    #[test]
    fn batch_sampler_is_a_partial_permutation() {
        let s = BatchSampler::new(RngHandle::new(1, 2), 10, 4);
        let a = s.indices(3);
        assert_eq!(a, s.indices(3));
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert!(a.iter().all(|i| *i < 10));
        assert_eq!(
            BatchSampler::new(RngHandle::new(1, 2), 3, 8)
                .indices(0)
                .len(),
            3
        );
    }

    #[test]
    fn zero_rounds_leave_model_unchanged() {
        let b = bundle();
        let (out, log) = run_training(
            &config(2, 0, false),
            &b,
            vec![data(6, 0), data(6, 100)],
            None,
        )
        .unwrap();
        assert_eq!(out, b);
        assert!(log.rounds.is_empty());
    }

    #[test]
    fn single_client_matches_centralised_training() {
        let b = bundle();
        let cfg = RoundConfig {
            rounds: 4,
            ..config(1, 4, false)
        };
        let local = data(10, 0);
        let (fed, _) = run_training(&cfg, &b, vec![local.clone()], None).unwrap();

        let mut mono = b.clone();
        let mut od = Optimizer::new(cfg.optimizer).unwrap();
        let mut os = Optimizer::new(cfg.optimizer).unwrap();
        let (batch_rng, link_rng) = client_streams(cfg.seed, 0);
        let sampler = BatchSampler::new(batch_rng, local.len(), cfg.batch_size);
        for step in 0..4 {
            let idx = sampler.indices(step);
            let conds = cfg.link.draw(&link_rng, step, idx.len(), false).unwrap();
            let (rows, targets) = make_batch(idx.iter().map(|i| &local[*i])).unwrap();
            composite_step(
                &mut mono, &mut od, &mut os, &rows, &targets, &cfg.tasks, &conds,
            )
            .unwrap();
        }
        assert!(fed.device.max_abs_diff(&mono.device) < 1e-9);
        assert!(fed.server.max_abs_diff(&mono.server) < 1e-9);
    }

    #[test]
    fn bytes_match_trace_and_training_is_deterministic() {
        let b = bundle();
        let cfg = RoundConfig {
            local_steps: 2,
            ..config(3, 2, true)
        };
        let ds = || vec![data(8, 0), data(5, 100), data(7, 200)];
        let mut t1 = Vec::new();
        let (m1, log1) = run_training(&cfg, &b, ds(), Some(&mut t1)).unwrap();
        let mut t2 = Vec::new();
        let (m2, log2) = run_training(&cfg, &b, ds(), Some(&mut t2)).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
        let recs = read_trace(&t1).unwrap();
        let payload: u64 = recs.iter().map(|r| r.payload.len() as u64).sum();
        assert_eq!(payload, log1.bytes_exchanged());
        // 4 messages per local step plus update and broadcast, per client and round.
        assert_eq!(recs.len(), 2 * 3 * (4 * 2 + 2));
        assert!(recs
            .windows(2)
            .all(|w| (w[0].round, w[0].client) <= (w[1].round, w[1].client)));
        for n in ["fusion.enc.l1.w", "fusion.enc.l2.w"] {
            assert_eq!(m1.device.get(n).unwrap(), b.device.get(n).unwrap());
        }
        for n in ["fusion.dec.l1.w", "fusion.dec.l2.b"] {
            assert_eq!(m1.server.get(n).unwrap(), b.server.get(n).unwrap());
        }
    }

    #[test]
    fn training_reduces_loss() {
        let b = bundle();
        let cfg = RoundConfig {
            local_steps: 3,
            batch_size: 8,
            ..config(2, 6, false)
        };
        let (_, log) = run_training(&cfg, &b, vec![data(20, 0), data(20, 100)], None).unwrap();
        assert!(log.rounds.last().unwrap().loss < log.rounds[0].loss);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("round,metric,value\n0,loss,"));
    }

    #[test]
    fn bad_configs_rejected() {
        let b = bundle();
        assert!(run_training(&config(2, 1, false), &b, vec![data(4, 0)], None).is_err());
        let cfg = RoundConfig {
            weights: Some(vec![0.7, 0.7]),
            ..config(2, 1, false)
        };
        assert!(run_training(&cfg, &b, vec![data(4, 0), data(4, 9)], None).is_err());
        assert!(run_training(&config(2, 1, false), &b, vec![data(4, 0), vec![]], None).is_err());
    }
}
