//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [model]
//! fusion_hidden = 64
//! lora_rank = 4
//! lora_alpha = 8.0
//!
//! [dataset]
//! n_public = 2000
//! n_train = 600
//! n_test = 500
//! noise = 0.15
//!
//! [pretrain]
//! steps = 3000
//! batch_size = 32
//! learning_rate = 0.003
//!
//! [federation]
//! clients = 3
//! local_steps = 2
//! rounds = 20
//!
//! [sweep]
//! snr_db = [-6.0, -3.0, 0.0, 3.0, 6.0, 9.0, 12.0]
//! seeds = [1, 2, 3, 4, 5]
//! budget = 16
//! ```
//!
//! Every section and key is optional; missing values take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compression::ClientProfile;
use crate::error::{Error, Result};
use crate::experiments::dataset::DatasetSpec;
use crate::federation::{LinkSampler, RoundConfig};
use crate::model::{ModelDims, TaskId};
use crate::nn::OptimizerConfig;
use crate::rag::DEFAULT_GATE;
use crate::transmission::MAX_BUDGET;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub link: LinkSampler,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 3e-3,
            // Cleaner links than fine-tuning sees, so joint features form before noise robustness.
            link: LinkSampler {
                snr_db: [3.0, 12.0],
                ..LinkSampler::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate for the narrow from-scratch arm, which has no pretraining.
    pub baseline2_learning_rate: f64,
    pub train_with_channel_noise: bool,
    pub weights: Option<Vec<f64>>,
    pub link: LinkSampler,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            local_steps: 2,
            rounds: 20,
            batch_size: 16,
            learning_rate: 2e-3,
            baseline2_learning_rate: 1e-2,
            train_with_channel_noise: true,
            weights: None,
            link: LinkSampler::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub run_id: String,
    pub snr_db: Vec<f64>,
    pub seeds: Vec<u64>,
    pub budget: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            run_id: "mtsc".into(),
            snr_db: vec![-6.0, -3.0, 0.0, 3.0, 6.0, 9.0, 12.0],
            seeds: vec![1, 2, 3, 4, 5],
            budget: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub k_factor: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            k_factor: crate::channel::DEFAULT_K_FACTOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RagConfig {
    /// Adds a `proposed_rag` arm with knowledge bases at both ends.
    pub enabled: bool,
    pub k: usize,
    pub transmitter_gate: f64,
    pub receiver_gate: f64,
}

impl Default for RagConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: 3,
            transmitter_gate: DEFAULT_GATE,
            receiver_gate: DEFAULT_GATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub mem_budget_bytes: u64,
    pub compute_budget_mac: u64,
    pub min_accuracy: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            mem_budget_bytes: 64 * 1024,
            compute_budget_mac: 40_000,
            min_accuracy: 0.5,
        }
    }
}

impl CompressionConfig {
    pub fn profile(&self) -> ClientProfile {
        ClientProfile {
            mem_budget_bytes: self.mem_budget_bytes,
            compute_budget_mac: self.compute_budget_mac,
            min_accuracy: self.min_accuracy,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed for pretraining; `--seed` overrides it.
    pub seed: u64,
    pub tasks: Option<Vec<TaskId>>,
    pub model: ModelDims,
    pub dataset: DatasetSpec,
    pub channel: ChannelConfig,
    pub pretrain: PretrainConfig,
    pub federation: FederationConfig,
    pub sweep: SweepConfig,
    pub rag: RagConfig,
    pub compression: CompressionConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.tasks.clone().unwrap_or_else(|| TaskId::ALL.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.pretrain.link.validate()?;
        self.federation.link.validate()?;
        if self.tasks().is_empty() {
            return Err(Error::Config("empty task list".into()));
        }
        if self.model.fusion_hidden == 0 || self.model.lora_rank == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if self.sweep.budget > MAX_BUDGET {
            return Err(Error::Config(format!(
                "sweep budget {} exceeds {MAX_BUDGET}",
                self.sweep.budget
            )));
        }
        if self.sweep.snr_db.iter().any(|s| !s.is_finite()) || self.sweep.seeds.is_empty() {
            return Err(Error::Config(
                "sweep needs finite SNRs and at least one seed".into(),
            ));
        }
        if self.dataset.n_train < self.federation.clients
            || self.dataset.n_public == 0
            || self.dataset.n_test == 0
        {
            return Err(Error::Config(
                "dataset splits are too small for the configured run".into(),
            ));
        }
        if !(self.channel.k_factor >= 0.0) {
            return Err(Error::Config("k_factor must be non-negative".into()));
        }
        OptimizerConfig::adam(self.pretrain.learning_rate).validate()?;
        self.round_config(self.seed, false)?.validate()
    }

    /// Federation settings for one arm and seed.
    pub fn round_config(&self, seed: u64, baseline2: bool) -> Result<RoundConfig> {
        let f = &self.federation;
        let lr = if baseline2 {
            f.baseline2_learning_rate
        } else {
            f.learning_rate
        };
        Ok(RoundConfig {
            num_clients: f.clients,
            local_steps: f.local_steps,
            rounds: f.rounds,
            batch_size: f.batch_size,
            train_with_channel_noise: f.train_with_channel_noise,
            link: f.link.clone(),
            weights: f.weights.clone(),
            optimizer: OptimizerConfig::adam(lr),
            tasks: self.tasks(),
            seed,
        })
    }

    /// Dataset for one sweep seed: same generator, seed-specific samples.
    pub fn dataset_for(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            seed: self.dataset.seed ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..self.dataset.clone()
        }
    }
}
