//! The multi-task semantic pipeline.
//!
//! Transmitter (device side): modality encoders, a fusion encoder with
//! low-rank adapter slots, a variable-rate JSC encoder and the task heads.
//! Receiver (server side): the JSC decoder and the fusion decoder. Every
//! parameter lives in exactly one of the two [`ParamStore`]s of a
//! [`ModelBundle`], keyed by a dotted name.

mod bundle;
mod encoders;
mod heads;
mod jsc;
mod pipeline;

pub use bundle::{ModelBundle, ModelDims, Side};
pub use encoders::{audio_features, encode_modality, fuse_semantics, validate_sample, AUDIO_BANDS};
pub use heads::{fusion_decode, task_decode};
pub(crate) use jsc::{gather_symbols, scatter_symbols};
pub use jsc::{jsc_decode, jsc_encode, tier_offset, TX_WIDTH};
pub use pipeline::{
    composite_step, device_forward, forward_pipeline, heads_and_loss, server_forward, AllocPolicy,
    DeviceForward, LossParts, PipelineOptions, PipelineOutput, StepReport, TxCondition,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
pub use crate::transmission::SEMANTIC_DIM;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const VOCAB: usize = 64;
pub const MAX_TOKENS: usize = 16;
pub const AUDIO_LEN: usize = 64;
pub const FEATURE_DIM: usize = 32;
pub const NUM_CLASSES: usize = 10;
pub const NUM_ANSWERS: usize = 10;
pub const CAPTION_SLOTS: usize = 8;
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Audio,
}

impl Modality {
    /// Canonical concatenation order.
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Audio];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Audio => "audio",
        }
    }
}

/// One modality payload of a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalitySample {
    /// 16×16 row-major pixels in [0, 1].
    Image(Vec<f64>),
    /// Up to 16 token ids below 64, right-padded with 0.
    Text(Vec<usize>),
    /// 64 waveform samples in [-1, 1].
    Audio(Vec<f64>),
}

impl ModalitySample {
    pub fn modality(&self) -> Modality {
        match self {
            ModalitySample::Image(_) => Modality::Image,
            ModalitySample::Text(_) => Modality::Text,
            ModalitySample::Audio(_) => Modality::Audio,
        }
    }
}

/// Which modalities were fused, indexed by [`Modality::slot`].
pub type SourceMask = [bool; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVector {
    pub values: Vec<f64>,
    pub source_mask: SourceMask,
}

impl SemanticVector {
    pub fn new(values: Vec<f64>, source_mask: SourceMask) -> Result<Self> {
        if values.len() != SEMANTIC_DIM {
            return Err(Error::shape(
                "semantic vector",
                &[values.len()],
                &[SEMANTIC_DIM],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("semantic vector".into()));
        }
        Ok(Self {
            values,
            source_mask,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Classify,
    Reconstruct,
    Vqa,
    Caption,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::Classify,
        TaskId::Reconstruct,
        TaskId::Vqa,
        TaskId::Caption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Classify => "classify",
            TaskId::Reconstruct => "reconstruct",
            TaskId::Vqa => "vqa",
            TaskId::Caption => "caption",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown task '{s}'")))
    }

    /// Output width of the head.
    pub fn arity(self) -> usize {
        match self {
            TaskId::Classify => NUM_CLASSES,
            TaskId::Reconstruct => IMAGE_PIXELS,
            TaskId::Vqa => NUM_ANSWERS,
            TaskId::Caption => CAPTION_SLOTS * VOCAB,
        }
    }

    pub fn head(self) -> String {
        format!("head.{}", self.name())
    }
}

/// Supervision for a batch. Labels never leave the device.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub class: Vec<usize>,
    pub answer: Vec<usize>,
    /// n × 256 reference images.
    pub image: Tensor,
    /// n·8 caption slot tokens, row-major.
    pub caption: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }
}

/// Parameter store plus the adapter scale, enough to bind named layers.
#[derive(Clone, Copy)]
pub(crate) struct Net<'a> {
    pub p: &'a crate::nn::ParamStore,
    pub alpha: f64,
}

impl<'a> Net<'a> {
    pub fn new(p: &'a crate::nn::ParamStore, dims: &ModelDims) -> Self {
        Self {
            p,
            alpha: dims.lora_alpha,
        }
    }

    pub fn dense(
        &self,
        g: &mut crate::nn::Graph,
        x: crate::nn::Var,
        prefix: &str,
    ) -> Result<crate::nn::Var> {
        crate::nn::layers::bound_dense(g, self.p, x, prefix, self.alpha)
    }

    pub fn dense_tanh(
        &self,
        g: &mut crate::nn::Graph,
        x: crate::nn::Var,
        prefix: &str,
    ) -> Result<crate::nn::Var> {
        let y = self.dense(g, x, prefix)?;
        Ok(g.tanh(y))
    }
}

/// A multi-modal input with its supervision. The reconstruction target is
/// the sample's own image (zeros when it has none).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub inputs: Vec<ModalitySample>,
    pub class: usize,
    pub answer: usize,
    /// Exactly [`CAPTION_SLOTS`] tokens, right-padded with [`PAD`].
    pub caption: Vec<usize>,
}

impl LabeledSample {
    pub fn image(&self) -> Option<&[f64]> {
        self.inputs.iter().find_map(|s| match s {
            ModalitySample::Image(px) => Some(px.as_slice()),
            _ => None,
        })
    }
}

/// Splits labeled samples into model inputs and targets.
pub fn make_batch<'a, I>(samples: I) -> Result<(Vec<Vec<ModalitySample>>, Targets)>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let mut rows = Vec::new();
    let mut class = Vec::new();
    let mut answer = Vec::new();
    let mut image = Vec::new();
    let mut caption = Vec::new();
    for s in samples {
        if s.caption.len() != CAPTION_SLOTS {
            return Err(Error::shape(
                "caption target",
                &[s.caption.len()],
                &[CAPTION_SLOTS],
            ));
        }
        rows.push(s.inputs.clone());
        class.push(s.class);
        answer.push(s.answer);
        match s.image() {
            Some(px) => image.extend_from_slice(px),
            None => image.extend(std::iter::repeat_n(0.0, IMAGE_PIXELS)),
        }
        caption.extend_from_slice(&s.caption);
    }
    let n = rows.len();
    Ok((
        rows,
        Targets {
            class,
            answer,
            image: Tensor::matrix(n, IMAGE_PIXELS, image)?,
            caption,
        },
    ))
}
