use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TaskId, AUDIO_BANDS, FEATURE_DIM, IMAGE_PIXELS, VOCAB};
use crate::nn::checkpoint;
use crate::nn::layers::{DenseLayer, LoraAdapter, DEFAULT_LORA_ALPHA, DEFAULT_LORA_RANK};
use crate::nn::{ParamStore, RngHandle, Tensor};
use crate::transmission::{BLOCK_DIM, MAX_SYMBOLS_PER_BLOCK, NUM_BLOCKS, SEMANTIC_DIM};

/// Layers that carry adapters once a bundle is fine-tuned.
pub const FUSION_ENCODER: [&str; 2] = ["fusion.enc.l1", "fusion.enc.l2"];
pub const FUSION_DECODER: [&str; 2] = ["fusion.dec.l1", "fusion.dec.l2"];

const META_ALPHA: &str = "meta/lora_alpha";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Device,
    Server,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Device => "device/",
            Side::Server => "server/",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Hidden width of the fusion encoder and decoder.
    pub fusion_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            fusion_hidden: 64,
            lora_rank: DEFAULT_LORA_RANK,
            lora_alpha: DEFAULT_LORA_ALPHA,
        }
    }
}

impl ModelDims {
    /// Quarter-width fusion stack without adapters.
    pub fn narrow(&self) -> Self {
        Self {
            fusion_hidden: (self.fusion_hidden / 4).max(1),
            ..self.clone()
        }
    }
}

pub(crate) fn enc_tier(block: usize, s: usize) -> String {
    format!("jsc.enc.b{block}.t{s}")
}

pub(crate) fn dec_tier(block: usize, s: usize) -> String {
    format!("jsc.dec.b{block}.t{s}")
}

/// (name, d_in, d_out, side) for every dense layer, in init order.
fn layer_table(h: usize) -> Vec<(String, usize, usize, Side)> {
    let mut t: Vec<(String, usize, usize, Side)> = vec![
        ("enc.image.l1".into(), IMAGE_PIXELS, 64, Side::Device),
        ("enc.image.l2".into(), 64, FEATURE_DIM, Side::Device),
        ("enc.text.l1".into(), FEATURE_DIM, FEATURE_DIM, Side::Device),
        (
            "enc.audio.l1".into(),
            AUDIO_BANDS,
            FEATURE_DIM,
            Side::Device,
        ),
        (FUSION_ENCODER[0].into(), 3 * FEATURE_DIM, h, Side::Device),
        (FUSION_ENCODER[1].into(), h, SEMANTIC_DIM, Side::Device),
    ];
    for b in 0..NUM_BLOCKS {
        for s in 1..=MAX_SYMBOLS_PER_BLOCK {
            t.push((enc_tier(b, s), BLOCK_DIM, 2 * s, Side::Device));
        }
    }
    for task in TaskId::ALL {
        t.push((task.head(), FEATURE_DIM, task.arity(), Side::Device));
    }
    for b in 0..NUM_BLOCKS {
        for s in 1..=MAX_SYMBOLS_PER_BLOCK {
            t.push((dec_tier(b, s), 2 * s, BLOCK_DIM, Side::Server));
        }
    }
    t.push((FUSION_DECODER[0].into(), SEMANTIC_DIM, h, Side::Server));
    t.push((FUSION_DECODER[1].into(), h, FEATURE_DIM, Side::Server));
    t
}

/// Device-side and server-side parameters of one pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub device: ParamStore,
    pub server: ParamStore,
}

impl ModelBundle {
    /// Fresh random weights; every layer draws from its own derived stream.
    pub fn init(dims: ModelDims, rng: &RngHandle) -> Self {
        let mut device = ParamStore::new();
        let mut server = ParamStore::new();
        for (i, (name, d_in, d_out, side)) in
            layer_table(dims.fusion_hidden).into_iter().enumerate()
        {
            let layer = DenseLayer::init(d_in, d_out, &mut rng.derive(i as u64).rng());
            let store = match side {
                Side::Device => &mut device,
                Side::Server => &mut server,
            };
            layer.store(store, &name);
        }
        let emb = Tensor::randn(&[VOCAB, FEATURE_DIM], 1.0, &mut rng.derive(u64::MAX).rng());
        device.insert("enc.text.emb.w", emb, false);
        Self {
            dims,
            device,
            server,
        }
    }

    /// Every parameter zero; useful for closed-form checks.
    pub fn zeros(dims: ModelDims) -> Self {
        let mut b = Self::init(dims, &RngHandle::new(0, 0));
        for store in [&mut b.device, &mut b.server] {
            for (_, p) in store.iter_mut() {
                p.tensor.data_mut().fill(0.0);
            }
        }
        b
    }

    pub fn store(&self, side: Side) -> &ParamStore {
        match side {
            Side::Device => &self.device,
            Side::Server => &self.server,
        }
    }

    pub fn store_mut(&mut self, side: Side) -> &mut ParamStore {
        match side {
            Side::Device => &mut self.device,
            Side::Server => &mut self.server,
        }
    }

    pub fn has_lora(&self) -> bool {
        self.device
            .contains(&format!("{}.lora_a", FUSION_ENCODER[0]))
    }

    /// Adds adapters to the fusion encoder and decoder and freezes their base
    /// weights. Adapter B starts at zero, so outputs are unchanged.
    pub fn attach_lora(&mut self, rng: &RngHandle) -> Result<()> {
        let layers = FUSION_ENCODER
            .iter()
            .map(|n| (*n, Side::Device))
            .chain(FUSION_DECODER.iter().map(|n| (*n, Side::Server)));
        for (i, (prefix, side)) in layers.enumerate() {
            let (rank, alpha) = (self.dims.lora_rank, self.dims.lora_alpha);
            let store = self.store_mut(side);
            let w = store.get(&format!("{prefix}.w"))?;
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            let adapter =
                LoraAdapter::init(d_in, d_out, rank, alpha, &mut rng.derive(i as u64).rng())?;
            store.insert(format!("{prefix}.lora_a"), adapter.a, false);
            store.insert(format!("{prefix}.lora_b"), adapter.b, false);
            store.set_frozen(&format!("{prefix}.w"), true)?;
            store.set_frozen(&format!("{prefix}.b"), true)?;
        }
        Ok(())
    }

    /// Sets JSC tiers to identity pairing: tier s ≥ 2 sends the four raw
    /// features (zero padded), tier 1 sends the first two. Decoders are the
    /// matching left inverses.
    pub fn set_identity_tiers(&mut self) -> Result<()> {
        for b in 0..NUM_BLOCKS {
            for s in 1..=MAX_SYMBOLS_PER_BLOCK {
                let n = 2 * s;
                let mut enc = vec![0.0; n * BLOCK_DIM];
                let mut dec = vec![0.0; BLOCK_DIM * n];
                for k in 0..n.min(BLOCK_DIM) {
                    enc[k * BLOCK_DIM + k] = 1.0;
                    dec[k * n + k] = 1.0;
                }
                let e = enc_tier(b, s);
                let d = dec_tier(b, s);
                self.device.load_values([
                    (
                        format!("{e}.w").as_str(),
                        &Tensor::matrix(n, BLOCK_DIM, enc)?,
                    ),
                    (format!("{e}.b").as_str(), &Tensor::zeros(&[n])),
                ])?;
                self.server.load_values([
                    (
                        format!("{d}.w").as_str(),
                        &Tensor::matrix(BLOCK_DIM, n, dec)?,
                    ),
                    (format!("{d}.b").as_str(), &Tensor::zeros(&[BLOCK_DIM])),
                ])?;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.device.num_scalars() + self.server.num_scalars()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let alpha = Tensor::scalar(self.dims.lora_alpha);
        let names: Vec<(String, &Tensor)> = [Side::Device, Side::Server]
            .into_iter()
            .flat_map(|side| {
                self.store(side)
                    .iter()
                    .map(move |(n, p)| (format!("{}{n}", side.prefix()), &p.tensor))
            })
            .chain(std::iter::once((META_ALPHA.to_string(), &alpha)))
            .collect();
        let mut buf = Vec::new();
        checkpoint::write_tensors(&mut buf, names.iter().map(|(n, t)| (n.as_str(), *t)))?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = checkpoint::read_tensors(&mut &bytes[..])?;
        Self::from_tensors(tensors)
    }

    /// Rebuilds a bundle from a checkpoint directory. Base weights of any
    /// layer with an adapter come back frozen.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut device = ParamStore::new();
        let mut server = ParamStore::new();
        let mut alpha = None;
        for (name, t) in tensors {
            if name == META_ALPHA {
                alpha = Some(t.data()[0]);
            } else if let Some(n) = name.strip_prefix(Side::Device.prefix()) {
                device.insert(n, t, false);
            } else if let Some(n) = name.strip_prefix(Side::Server.prefix()) {
                server.insert(n, t, false);
            } else {
                return Err(Error::format(
                    "MTSC1",
                    format!("unexpected tensor '{name}'"),
                ));
            }
        }
        let fusion = device.get(&format!("{}.w", FUSION_ENCODER[0]))?;
        let fusion_hidden = fusion.shape()[0];
        let lora_a = format!("{}.lora_a", FUSION_ENCODER[0]);
        let lora_rank = match device.get(&lora_a) {
            Ok(a) => a.shape()[0],
            Err(_) => DEFAULT_LORA_RANK,
        };
        let dims = ModelDims {
            fusion_hidden,
            lora_rank,
            lora_alpha: alpha.unwrap_or(DEFAULT_LORA_ALPHA),
        };
        for store in [&mut device, &mut server] {
            let adapted: Vec<String> = store
                .names()
                .filter_map(|n| n.strip_suffix(".lora_a").map(str::to_string))
                .collect();
            for prefix in adapted {
                store.set_frozen(&format!("{prefix}.w"), true)?;
                store.set_frozen(&format!("{prefix}.b"), true)?;
            }
        }
        let expected = Self::init(dims.clone(), &RngHandle::new(0, 0));
        for side in [Side::Device, Side::Server] {
            for (n, p) in expected.store(side).iter() {
                let got = match side {
                    Side::Device => device.get(n)?,
                    Side::Server => server.get(n)?,
                };
                if got.shape() != p.tensor.shape() {
                    return Err(Error::shape("checkpoint", got.shape(), p.tensor.shape()));
                }
            }
        }
        Ok(Self {
            dims,
            device,
            server,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?)
    }
}
