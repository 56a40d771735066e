//! Training arms, evaluation and the SNR sweep.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelState;
use crate::error::{Error, Result};
use crate::experiments::baseline::run_baseline1;
use crate::experiments::config::ExperimentConfig;
use crate::experiments::dataset::Split;
use crate::experiments::metrics::{accuracy, argmax, compute_bleu1, compute_psnr, strip_pad};
use crate::experiments::stats::{confidence_interval, mean, std_dev};
use crate::federation::{run_training, BatchSampler, TrainLog};
use crate::model::{
    composite_step, forward_pipeline, make_batch, AllocPolicy, LabeledSample, ModelBundle,
    PipelineOptions, PipelineOutput, TaskId, TxCondition, CAPTION_SLOTS, VOCAB,
};
use crate::nn::{Optimizer, OptimizerConfig, RngHandle};
use crate::rag::{Augmenter, KnowledgeBase, Scope};
use crate::transmission::importance_weighted_distortion;

const INIT_STREAM: u64 = 0x696e_6974;
const PRETRAIN_STREAM: u64 = 0x7072_6574;
const LORA_STREAM: u64 = 0x6c6f_7261;
const NARROW_STREAM: u64 = 0x6e61_7272;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Pseudo-task under which semantic distortion is reported.
pub const SEMANTIC_TASK: &str = "semantic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "baseline1_traditional")]
    Baseline1,
    #[serde(rename = "baseline2_no_lam")]
    Baseline2,
    #[serde(rename = "proposed_rag")]
    ProposedRag,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Proposed => "proposed",
            Arm::Baseline1 => "baseline1_traditional",
            Arm::Baseline2 => "baseline2_no_lam",
            Arm::ProposedRag => "proposed_rag",
        }
    }
}

/// One cell of the sweep output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub seed: u64,
    pub snr_db: f64,
    pub arm: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

fn record_order(a: &MetricRecord, b: &MetricRecord) -> Ordering {
    (&a.run_id, a.seed)
        .cmp(&(&b.run_id, b.seed))
        .then(a.snr_db.total_cmp(&b.snr_db))
        .then_with(|| (&a.arm, &a.task, &a.metric).cmp(&(&b.arm, &b.task, &b.metric)))
}

/// Phase I: centralised training of the full-width model on the public
/// split under random channel conditions. Returns the model (no adapters)
/// and the per-step loss.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<(ModelBundle, Vec<f64>)> {
    let p = &cfg.pretrain;
    let mut bundle = ModelBundle::init(cfg.model.clone(), &RngHandle::new(seed, INIT_STREAM));
    let public = cfg.dataset.split(Split::Public);
    let mut od = Optimizer::new(OptimizerConfig::adam(p.learning_rate))?;
    let mut os = Optimizer::new(OptimizerConfig::adam(p.learning_rate))?;
    let base = RngHandle::new(seed, PRETRAIN_STREAM);
    let sampler = BatchSampler::new(base.derive(1), public.len(), p.batch_size);
    let link_rng = base.derive(2);
    let tasks = cfg.tasks();
    let mut losses = Vec::with_capacity(p.steps);
    for step in 0..p.steps as u64 {
        let idx = sampler.indices(step);
        let conds = p.link.draw(&link_rng, step, idx.len(), true)?;
        let (rows, targets) = make_batch(idx.iter().map(|i| &public[*i]))?;
        losses.push(
            composite_step(
                &mut bundle,
                &mut od,
                &mut os,
                &rows,
                &targets,
                &tasks,
                &conds,
            )?
            .loss,
        );
    }
    Ok((bundle, losses))
}

/// Phase II for the proposed arm: adapters on the pretrained model, then
/// federated split fine-tuning on the seed's client shards.
pub fn finetune_proposed(
    cfg: &ExperimentConfig,
    pretrained: &ModelBundle,
    seed: u64,
) -> Result<(ModelBundle, TrainLog)> {
    finetune_proposed_traced(cfg, pretrained, seed, None)
}

/// As [`finetune_proposed`], additionally streaming the protocol trace.
pub fn finetune_proposed_traced(
    cfg: &ExperimentConfig,
    pretrained: &ModelBundle,
    seed: u64,
    trace: Option<&mut dyn std::io::Write>,
) -> Result<(ModelBundle, TrainLog)> {
    let mut b = pretrained.clone();
    if !b.has_lora() {
        b.attach_lora(&RngHandle::new(seed, LORA_STREAM))?;
    }
    let shards = cfg.dataset_for(seed).client_shards(cfg.federation.clients);
    run_training(&cfg.round_config(seed, false)?, &b, shards, trace)
}

/// The from-scratch arm: quarter-width fusion stack, no pretraining and no
/// adapters, trained only by the federated rounds.
pub fn train_baseline2(cfg: &ExperimentConfig, seed: u64) -> Result<(ModelBundle, TrainLog)> {
    let b = ModelBundle::init(cfg.model.narrow(), &RngHandle::new(seed, NARROW_STREAM));
    let shards = cfg.dataset_for(seed).client_shards(cfg.federation.clients);
    run_training(&cfg.round_config(seed, true)?, &b, shards, None)
}

/// Trained models of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmModels {
    pub proposed: ModelBundle,
    pub baseline2: ModelBundle,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

impl ArmModels {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.proposed.save(&dir.join("proposed.mtsc"))?;
        self.baseline2.save(&dir.join("baseline2.mtsc"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::MissingCheckpoint(p.display().to_string()));
            }
            ModelBundle::load(&p)
        };
        Ok(Self {
            proposed: load("proposed.mtsc")?,
            baseline2: load("baseline2.mtsc")?,
        })
    }
}

/// Class-prototype knowledge bases: the local one indexes fusion-encoder
/// outputs, the global one fusion-decoder outputs, both from clean
/// full-budget passes over `samples`.
pub fn build_knowledge_bases(
    bundle: &ModelBundle,
    samples: &[LabeledSample],
) -> Result<(KnowledgeBase, KnowledgeBase)> {
    let (rows, _) = make_batch(samples)?;
    let conds =
        vec![
            TxCondition::noiseless(crate::transmission::MAX_BUDGET, AllocPolicy::Importance);
            rows.len()
        ];
    let out = forward_pipeline(bundle, &rows, &[], &conds, &PipelineOptions::default())?;
    let mut local = KnowledgeBase::new(Scope::Local);
    let mut global = KnowledgeBase::new(Scope::Global);
    for c in 0..crate::model::NUM_CLASSES {
        let members: Vec<usize> = (0..samples.len())
            .filter(|i| samples[*i].class == c)
            .collect();
        if members.is_empty() {
            continue;
        }
        let proto = |t: &crate::nn::Tensor| -> Vec<f64> {
            let mut m = vec![0.0; t.cols()];
            for &i in &members {
                for (a, v) in m.iter_mut().zip(t.row(i)) {
                    *a += v / members.len() as f64;
                }
            }
            m
        };
        let (sv, rep) = (proto(&out.sv), proto(&out.rep));
        if sv.iter().any(|v| *v != 0.0) {
            local.insert(sv.clone(), sv, format!("class-{c}"))?;
        }
        if rep.iter().any(|v| *v != 0.0) {
            global.insert(rep.clone(), rep, format!("class-{c}"))?;
        }
    }
    Ok((local, global))
}

/// Task metrics of one arm on one batch, as `(task, metric, value)`.
pub fn task_metrics(
    out: &PipelineOutput,
    samples: &[LabeledSample],
) -> Result<Vec<(String, String, f64)>> {
    let mut m = Vec::new();
    let labels = |f: fn(&LabeledSample) -> usize| samples.iter().map(f).collect::<Vec<_>>();
    for (task, y) in &out.outputs {
        let n = y.rows();
        match task {
            TaskId::Classify | TaskId::Vqa => {
                let pred: Vec<usize> = (0..n).map(|i| argmax(y.row(i))).collect();
                let truth = if *task == TaskId::Classify {
                    labels(|s| s.class)
                } else {
                    labels(|s| s.answer)
                };
                m.push((
                    task.name().to_string(),
                    "accuracy".to_string(),
                    accuracy(&pred, &truth),
                ));
            }
            TaskId::Reconstruct => {
                let mut total = 0.0;
                for (i, s) in samples.iter().enumerate() {
                    let reference = s.image().ok_or_else(|| {
                        Error::InvalidInput("reconstruction needs an image".into())
                    })?;
                    total += compute_psnr(reference, y.row(i), 1.0)?;
                }
                m.push((
                    task.name().to_string(),
                    "psnr_db".to_string(),
                    total / n as f64,
                ));
            }
            TaskId::Caption => {
                let mut total = 0.0;
                for (i, s) in samples.iter().enumerate() {
                    let row = y.row(i);
                    let tokens: Vec<usize> = (0..CAPTION_SLOTS)
                        .map(|k| argmax(&row[k * VOCAB..(k + 1) * VOCAB]))
                        .collect();
                    total += compute_bleu1(&strip_pad(&tokens), &strip_pad(&s.caption));
                }
                m.push((
                    task.name().to_string(),
                    "bleu1".to_string(),
                    total / n as f64,
                ));
            }
        }
    }
    Ok(m)
}

/// Mean importance-weighted distortion between clean semantics `reference`
/// and the receiver's estimate in `out`, weighted by `reference`'s scores.
pub fn semantic_distortion(reference: &PipelineOutput, out: &PipelineOutput) -> Result<f64> {
    let n = reference.sv.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += importance_weighted_distortion(
            reference.sv.row(i),
            out.sv_hat.row(i),
            &reference.scores[i],
        )?;
    }
    Ok(total / n as f64)
}

/// Per-sample evaluation links: identical for every arm at a given
/// `(seed, snr)`, so arms see the same channel realisations.
pub fn eval_links(seed: u64, snr_db: f64, k_factor: f64, n: usize) -> Result<Vec<ChannelState>> {
    let h = RngHandle::new(seed, EVAL_STREAM).derive(snr_db.to_bits());
    (0..n)
        .map(|i| ChannelState::new(snr_db, k_factor, h.derive(i as u64)))
        .collect()
}

fn conds(links: &[ChannelState], budget: usize, policy: AllocPolicy) -> Vec<TxCondition> {
    links
        .iter()
        .map(|l| TxCondition::over(*l, budget, policy.clone()))
        .collect()
}

/// Mean importance-weighted distortion with importance-aware and with
/// uniform allocation at the same budget and channel realisations.
pub fn allocation_gain(
    bundle: &ModelBundle,
    samples: &[LabeledSample],
    budget: usize,
    snr_db: f64,
    k_factor: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let (rows, _) = make_batch(samples)?;
    let links = eval_links(seed, snr_db, k_factor, rows.len())?;
    let opts = PipelineOptions::default();
    let imp = forward_pipeline(
        bundle,
        &rows,
        &[],
        &conds(&links, budget, AllocPolicy::Importance),
        &opts,
    )?;
    let uni = forward_pipeline(
        bundle,
        &rows,
        &[],
        &conds(&links, budget, AllocPolicy::Uniform),
        &opts,
    )?;
    Ok((
        semantic_distortion(&imp, &imp)?,
        semantic_distortion(&imp, &uni)?,
    ))
}

/// Metrics of every arm for one seed and SNR.
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    models: &ArmModels,
    kbs: Option<&(KnowledgeBase, KnowledgeBase)>,
    test: &[LabeledSample],
    seed: u64,
    snr_db: f64,
) -> Result<Vec<MetricRecord>> {
    let tasks = cfg.tasks();
    let (rows, _) = make_batch(test)?;
    let links = eval_links(seed, snr_db, cfg.channel.k_factor, rows.len())?;
    let budget = cfg.sweep.budget;
    let none = PipelineOptions::default();
    let noisy = conds(&links, budget, AllocPolicy::Importance);
    let mut arms: Vec<(Arm, PipelineOutput, PipelineOutput)> = Vec::new();

    let proposed = forward_pipeline(&models.proposed, &rows, &tasks, &noisy, &none)?;
    arms.push((Arm::Proposed, proposed.clone(), proposed));

    let b1 = run_baseline1(&models.proposed, &rows, &tasks, &links)?;
    let clean_conds =
        vec![
            TxCondition::noiseless(crate::transmission::MAX_BUDGET, AllocPolicy::Importance);
            rows.len()
        ];
    let clean = forward_pipeline(&models.proposed, &rows, &[], &clean_conds, &none)?;
    arms.push((Arm::Baseline1, clean, b1.pipeline));

    let b2 = forward_pipeline(&models.baseline2, &rows, &tasks, &noisy, &none)?;
    arms.push((Arm::Baseline2, b2.clone(), b2));

    if let Some((local, global)) = kbs {
        let k = cfg.rag.k;
        let opts = PipelineOptions {
            transmitter: Some(Augmenter {
                kb: local,
                k,
                gate: cfg.rag.transmitter_gate,
            }),
            receiver: Some(Augmenter {
                kb: global,
                k,
                gate: cfg.rag.receiver_gate,
            }),
        };
        let rag = forward_pipeline(&models.proposed, &rows, &tasks, &noisy, &opts)?;
        arms.push((Arm::ProposedRag, rag.clone(), rag));
    }

    let mut records = Vec::new();
    for (arm, reference, out) in arms {
        let mut push = |task: String, metric: String, value: f64| {
            records.push(MetricRecord {
                run_id: cfg.sweep.run_id.clone(),
                seed,
                snr_db,
                arm: arm.name().to_string(),
                task,
                metric,
                value,
            })
        };
        for (t, m, v) in task_metrics(&out, test)? {
            push(t, m, v);
        }
        push(
            SEMANTIC_TASK.into(),
            "iw_distortion".into(),
            semantic_distortion(&reference, &out)?,
        );
    }
    Ok(records)
}

/// Every (seed, SNR) cell, evaluated in parallel and sorted canonically.
pub fn run_snr_sweep(
    cfg: &ExperimentConfig,
    models: &[(u64, ArmModels)],
) -> Result<Vec<MetricRecord>> {
    let mut jobs = Vec::new();
    for (seed, m) in models {
        let test = cfg.dataset_for(*seed).split(Split::Test);
        let kbs = if cfg.rag.enabled {
            Some(build_knowledge_bases(
                &m.proposed,
                &cfg.dataset.split(Split::Public),
            )?)
        } else {
            None
        };
        for &snr in &cfg.sweep.snr_db {
            jobs.push((*seed, m, snr, test.clone(), kbs.clone()));
        }
    }
    let results: Vec<Result<Vec<MetricRecord>>> = jobs
        .par_iter()
        .map(|(seed, m, snr, test, kbs)| evaluate_cell(cfg, m, kbs.as_ref(), test, *seed, *snr))
        .collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    out.sort_by(record_order);
    Ok(out)
}

pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Aggregate over seeds of one (run, snr, arm, task, metric).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub snr_db: f64,
    pub arm: String,
    pub task: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
}

pub fn summarize(records: &[MetricRecord]) -> Result<Vec<SummaryRow>> {
    let mut groups: Vec<((String, f64, String, String, String), Vec<f64>)> = Vec::new();
    let mut sorted: Vec<&MetricRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.run_id
            .cmp(&b.run_id)
            .then(a.snr_db.total_cmp(&b.snr_db))
            .then_with(|| {
                (&a.arm, &a.task, &a.metric, a.seed).cmp(&(&b.arm, &b.task, &b.metric, b.seed))
            })
    });
    for r in sorted {
        let key = (
            r.run_id.clone(),
            r.snr_db,
            r.arm.clone(),
            r.task.clone(),
            r.metric.clone(),
        );
        match groups.last_mut() {
            Some((k, v)) if *k == key => v.push(r.value),
            _ => groups.push((key, vec![r.value])),
        }
    }
    groups
        .into_iter()
        .map(|((run_id, snr_db, arm, task, metric), v)| {
            let m = mean(&v);
            let (lo, hi) = if v.len() >= 2 {
                confidence_interval(&v, 0.95)?
            } else {
                (m, m)
            };
            Ok(SummaryRow {
                run_id,
                snr_db,
                arm,
                task,
                metric,
                n: v.len(),
                mean: m,
                std: std_dev(&v),
                ci95_lo: lo,
                ci95_hi: hi,
            })
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Values of one (arm, task, metric) per seed at one SNR.
pub fn values_at(
    records: &[MetricRecord],
    arm: Arm,
    task: &str,
    metric: &str,
    snr_db: f64,
) -> Vec<f64> {
    records
        .iter()
        .filter(|r| {
            r.arm == arm.name() && r.task == task && r.metric == metric && r.snr_db == snr_db
        })
        .map(|r| r.value)
        .collect()
}
