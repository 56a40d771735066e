use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mtsc_core::compression::{compress, optimize_plan};
use mtsc_core::experiments::runner::{
    evaluate_cell, finetune_proposed, finetune_proposed_traced, pretrain, read_metrics_csv,
    run_snr_sweep, seed_dir, summarize, train_baseline2, write_metrics_csv, write_summary_csv,
    ArmModels,
};
use mtsc_core::experiments::{ExperimentConfig, Split};
use mtsc_core::model::{
    forward_pipeline, make_batch, AllocPolicy, ModelBundle, PipelineOptions, TaskId, TxCondition,
};
use mtsc_core::rag::{KnowledgeBase, Scope};
use mtsc_core::transmission::SEMANTIC_DIM;

const PRETRAINED: &str = "pretrained.mtsc";

#[derive(Parser)]
#[command(
    name = "mtsc",
    version,
    about = "Multi-task semantic communication simulator"
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Centralised training on the public split.
    Pretrain,
    /// Federated split fine-tuning of both trained arms for every sweep seed.
    FedTrain {
        /// Write a binary protocol trace per seed.
        #[arg(long)]
        trace: bool,
    },
    /// Pick and apply a pruning/quantisation plan for a device profile.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate all arms over the SNR grid.
    Sweep,
    /// Evaluate one checkpoint at one SNR.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        snr: f64,
    },
    /// Knowledge-base maintenance.
    #[command(subcommand)]
    Kb(KbCommand),
}

#[derive(Args)]
struct KbFile {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, value_parser = parse_scope, default_value = "local")]
    scope: Scope,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Append one entry; the file is created when missing.
    Insert {
        #[command(flatten)]
        file: KbFile,
        #[arg(long)]
        tag: String,
        /// 32 comma-separated numbers.
        #[arg(long, value_parser = parse_vector)]
        key: Vector,
        /// Defaults to the key.
        #[arg(long, value_parser = parse_vector)]
        value: Option<Vector>,
    },
    Retrieve {
        #[command(flatten)]
        file: KbFile,
        #[arg(long, value_parser = parse_vector)]
        query: Vector,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Time exact retrieval on a random knowledge base.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        #[arg(long, default_value_t = 1_000)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    match s {
        "local" => Ok(Scope::Local),
        "global" => Ok(Scope::Global),
        _ => Err(format!("scope must be local or global, got '{s}'")),
    }
}

/// A semantic-dimension vector given as one comma-separated argument.
#[derive(Clone)]
struct Vector(Vec<f64>);

fn parse_vector(s: &str) -> Result<Vector, String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != SEMANTIC_DIM {
        return Err(format!("expected {SEMANTIC_DIM} numbers, got {}", v.len()));
    }
    Ok(Vector(v))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_pretrained(out: &Path) -> Result<ModelBundle> {
    let p = out.join(PRETRAINED);
    if !p.exists() {
        bail!(mtsc_core::Error::MissingCheckpoint(format!(
            "{} (run `mtsc pretrain` first)",
            p.display()
        )));
    }
    Ok(ModelBundle::load(&p)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Pretrain => {
            let t = Instant::now();
            let (bundle, losses) = pretrain(&cfg, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            bundle.save(&out.join(PRETRAINED))?;
            let mut w = create(&out.join("pretrain_loss.csv"))?;
            writeln!(w, "step,loss")?;
            for (i, l) in losses.iter().enumerate() {
                writeln!(w, "{i},{l}")?;
            }
            w.flush()?;
            let tail = &losses[losses.len().saturating_sub(50)..];
            println!(
                "pretrained {} steps in {:.1}s, final loss {:.4}",
                losses.len(),
                t.elapsed().as_secs_f64(),
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            );
        }
        Command::FedTrain { trace } => {
            let pre = load_pretrained(out)?;
            for &seed in &cfg.sweep.seeds {
                let dir = seed_dir(out, seed);
                std::fs::create_dir_all(&dir)?;
                let (proposed, log) = if trace {
                    let mut tw = create(&dir.join("trace.bin"))?;
                    let r = finetune_proposed_traced(&cfg, &pre, seed, Some(&mut tw))?;
                    tw.flush()?;
                    r
                } else {
                    finetune_proposed(&cfg, &pre, seed)?
                };
                log.write_csv(create(&dir.join("trainlog-proposed.csv"))?)?;
                let (baseline2, log2) = train_baseline2(&cfg, seed)?;
                log2.write_csv(create(&dir.join("trainlog-baseline2.csv"))?)?;
                ArmModels {
                    proposed,
                    baseline2,
                }
                .save(&dir)?;
                println!(
                    "seed {seed}: proposed loss {:.4} -> {:.4}, {} bytes exchanged",
                    log.rounds.first().map_or(f64::NAN, |r| r.loss),
                    log.rounds.last().map_or(f64::NAN, |r| r.loss),
                    log.bytes_exchanged()
                );
            }
        }
        Command::Compress { checkpoint } => {
            let bundle = ModelBundle::load(&checkpoint)?;
            let val = cfg.dataset.split(Split::Val);
            let (rows, targets) = make_batch(&val)?;
            let conds =
                vec![TxCondition::noiseless(cfg.sweep.budget, AllocPolicy::Importance); rows.len()];
            let decision = optimize_plan(&cfg.compression.profile(), &bundle.device, |m| {
                let b = ModelBundle {
                    device: m.params.clone(),
                    ..bundle.clone()
                };
                let o = forward_pipeline(
                    &b,
                    &rows,
                    &[TaskId::Classify],
                    &conds,
                    &PipelineOptions::default(),
                )?;
                let y = &o.outputs[&TaskId::Classify];
                let pred: Vec<usize> = (0..y.rows())
                    .map(|i| mtsc_core::experiments::metrics::argmax(y.row(i)))
                    .collect();
                Ok(mtsc_core::experiments::metrics::accuracy(
                    &pred,
                    &targets.class,
                ))
            })?;
            let model = compress(&bundle.device, &decision.plan)?;
            let mut w = create(&out.join("compressed.mtsc"))?;
            model.write_to(&mut w)?;
            w.flush()?;
            println!(
                "plan prune_rate={} bits={} accuracy={:.4} mem_bytes={} mac={} floor_met={}",
                decision.plan.prune_rate,
                decision.plan.quant_bits,
                decision.accuracy,
                decision.cost.mem_bytes,
                decision.cost.mac,
                decision.accuracy_floor_met
            );
        }
        Command::Sweep => {
            let models = cfg
                .sweep
                .seeds
                .iter()
                .map(|&s| Ok((s, ArmModels::load(&seed_dir(out, s))?)))
                .collect::<Result<Vec<_>>>()?;
            let records = run_snr_sweep(&cfg, &models)?;
            let path = out.join("metrics.csv");
            write_metrics_csv(&records, create(&path)?)?;
            write_summary_csv(
                &summarize(&read_metrics_csv(&path)?)?,
                create(&out.join("summary.csv"))?,
            )?;
            println!(
                "{} metric rows written to {}",
                records.len(),
                path.display()
            );
        }
        Command::Eval { checkpoint, snr } => {
            let bundle = ModelBundle::load(&checkpoint)?;
            let models = ArmModels {
                proposed: bundle.clone(),
                baseline2: bundle,
            };
            let test = cfg.dataset_for(cfg.seed).split(Split::Test);
            let mut w = csv_stdout();
            write_metrics_csv(
                &evaluate_cell(&cfg, &models, None, &test, cfg.seed, snr)?,
                &mut w,
            )?;
        }
        Command::Kb(cmd) => kb(cmd, cfg.seed)?,
    }
    Ok(())
}

fn csv_stdout() -> std::io::StdoutLock<'static> {
    std::io::stdout().lock()
}

fn kb(cmd: KbCommand, seed: u64) -> Result<()> {
    match cmd {
        KbCommand::Insert {
            file,
            tag,
            key,
            value,
        } => {
            let mut kb = if file.kb.exists() {
                KnowledgeBase::load(&file.kb, file.scope)?
            } else {
                KnowledgeBase::new(file.scope)
            };
            let value = value.unwrap_or_else(|| key.clone());
            let idx = kb.insert(key.0, value.0, tag)?;
            kb.save(&file.kb)?;
            println!("inserted entry {idx}; {} entries", kb.len());
        }
        KbCommand::Retrieve { file, query, k } => {
            let kb = KnowledgeBase::load(&file.kb, file.scope)?;
            let r = kb.retrieve(&query.0, k)?;
            if r.empty_kb {
                println!("knowledge base is empty");
            }
            for h in r.hits {
                println!(
                    "{}\t{}\t{:.6}",
                    h.entry.insert_index, h.entry.tag, h.similarity
                );
            }
        }
        KbCommand::Bench { size, queries, k } => {
            use rand::Rng;
            let mut rng = mtsc_core::nn::RngHandle::new(seed, 0x6b62).rng();
            let mut v = || -> Vec<f64> {
                (0..SEMANTIC_DIM)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            };
            let mut kb = KnowledgeBase::new(Scope::Local);
            for i in 0..size {
                let key = v();
                kb.insert(key.clone(), key, format!("e{i}"))?;
            }
            let qs: Vec<Vec<f64>> = (0..queries).map(|_| v()).collect();
            let t = Instant::now();
            let mut checksum = 0.0;
            for q in &qs {
                checksum += kb
                    .retrieve(q, k)?
                    .hits
                    .iter()
                    .map(|h| h.similarity)
                    .sum::<f64>();
            }
            let dt = t.elapsed().as_secs_f64();
            println!(
                "{queries} queries over {size} entries: {:.3} ms/query (checksum {checksum:.6})",
                1e3 * dt / queries.max(1) as f64
            );
        }
    }
    Ok(())
}
