//! Synthetic aligned image/text/audio corpus with four kinds of labels.
//!
//! Vocabulary layout (64 tokens):
//!
//! | ids   | use                               |
//! |-------|-----------------------------------|
//! | 0     | pad                               |
//! | 1–4   | question templates                |
//! | 5–9   | filler words                      |
//! | 10–49 | class words, four per class       |
//! | 50–59 | attribute word, one per class     |
//! | 60–63 | position word, one per quadrant   |

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    LabeledSample, ModalitySample, AUDIO_LEN, CAPTION_SLOTS, IMAGE_SIDE, NUM_CLASSES, PAD, VOCAB,
};
use crate::nn::RngHandle;

const DATA_STREAM: u64 = 0x6461_7461;
const QUESTION_SHIFT: [usize; 4] = [0, 3, 5, 7];
const FILLER: std::ops::Range<usize> = 5..10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Server-side pretraining corpus.
    Public,
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Public => 0,
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_public: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Intra-class variation: pixel noise, word substitution rate and audio noise scale.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_public: 2000,
            n_train: 600,
            n_val: 100,
            n_test: 500,
            seed: 1,
            noise: 0.15,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!(
                "dataset noise {} outside [0, 1]",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Public => self.n_public,
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Sample `index` of a split; identical for identical `(seed, split, index)`.
    pub fn sample(&self, split: Split, index: usize) -> LabeledSample {
        let rng = RngHandle::new(self.seed, DATA_STREAM).derive_path(&[split.tag(), index as u64]);
        generate_sample(
            split.tag() << 40 | index as u64,
            index % NUM_CLASSES,
            self.noise,
            &rng,
        )
    }

    pub fn split(&self, split: Split) -> Vec<LabeledSample> {
        (0..self.size(split))
            .map(|i| self.sample(split, i))
            .collect()
    }

    /// Round-robin partition of the training split over `clients`.
    pub fn client_shards(&self, clients: usize) -> Vec<Vec<LabeledSample>> {
        let mut shards = vec![Vec::new(); clients];
        for (i, s) in self.split(Split::Train).into_iter().enumerate() {
            shards[i % clients].push(s);
        }
        shards
    }
}

/// Answer to question template `q` about an image of class `c`.
pub fn vqa_answer(class: usize, question: usize) -> usize {
    (class + QUESTION_SHIFT[question]) % NUM_CLASSES
}

pub fn class_word(class: usize, j: usize) -> usize {
    10 + 4 * class + j
}

pub fn quadrant(cx: f64, cy: f64) -> usize {
    let mid = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    2 * usize::from(cy > mid) + usize::from(cx > mid)
}

/// Reference caption: class words, attribute, position, then more class words.
pub fn caption(class: usize, quad: usize) -> Vec<usize> {
    let words = [
        class_word(class, 0),
        class_word(class, 1),
        50 + class,
        60 + quad,
        class_word(class, 2),
        class_word(class, 3),
        FILLER.start + class % 5,
        FILLER.end - 1,
    ];
    let len = 4 + class % 5;
    let mut out = words[..len].to_vec();
    out.resize(CAPTION_SLOTS, PAD);
    out
}

/// Does pixel offset `(u, v)` from the shape centre belong to class `c`'s shape?
fn in_shape(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => u.abs() <= 2.5 && v.abs() <= 2.5,
        1 => r <= 3.0,
        2 => (u.abs() <= 0.5 && v.abs() <= 3.5) || (v.abs() <= 0.5 && u.abs() <= 3.5),
        3 => v.abs() <= 1.0 && u.abs() <= 3.5,
        4 => u.abs() <= 1.0 && v.abs() <= 3.5,
        5 => (u - v).abs() <= 0.8 && r <= 4.0,
        6 => (2.0..=3.5).contains(&r),
        7 => (-2.5..=2.5).contains(&v) && u.abs() <= (v + 2.5) * 0.7,
        8 => ((u + 2.0).powi(2) + v * v).sqrt() <= 1.3 || ((u - 2.0).powi(2) + v * v).sqrt() <= 1.3,
        _ => ((u - v).abs() <= 0.8 || (u + v).abs() <= 0.8) && r <= 4.0,
    }
}

fn generate_sample(id: u64, class: usize, noise: f64, rng: &RngHandle) -> LabeledSample {
    let mut r = rng.rng();
    let side = IMAGE_SIDE as f64;
    let cx = r.random_range(side / 2.0 - 2.0..side / 2.0 + 1.0);
    let cy = r.random_range(side / 2.0 - 2.0..side / 2.0 + 1.0);
    let px_noise = Normal::new(0.0, 0.5 * noise).expect("valid std");
    let image: Vec<f64> = (0..IMAGE_SIDE * IMAGE_SIDE)
        .map(|k| {
            let (y, x) = ((k / IMAGE_SIDE) as f64, (k % IMAGE_SIDE) as f64);
            let base = if in_shape(class, x - cx, y - cy) {
                0.85
            } else {
                0.1
            };
            (base + px_noise.sample(&mut r)).clamp(0.0, 1.0)
        })
        .collect();

    let question = r.random_range(0..QUESTION_SHIFT.len());
    let len = r.random_range(4..=8);
    let mut text = vec![1 + question];
    while text.len() < len {
        let w = if r.random::<f64>() < noise {
            r.random_range(FILLER.start..VOCAB)
        } else if r.random::<f64>() < 0.2 {
            50 + class
        } else {
            class_word(class, r.random_range(0..4))
        };
        text.push(w);
    }

    let freq = 2.0 + 3.0 * class as f64;
    let phase = r.random_range(0.0..std::f64::consts::TAU);
    let audio_noise = Normal::new(0.0, noise).expect("valid std");
    let audio: Vec<f64> = (0..AUDIO_LEN)
        .map(|t| {
            let w = std::f64::consts::TAU * freq * t as f64 / AUDIO_LEN as f64 + phase;
            (0.6 * w.sin() + audio_noise.sample(&mut r)).clamp(-1.0, 1.0)
        })
        .collect();

    LabeledSample {
        id,
        inputs: vec![
            ModalitySample::Image(image),
            ModalitySample::Text(text),
            ModalitySample::Audio(audio),
        ],
        class,
        answer: vqa_answer(class, question),
        caption: caption(class, quadrant(cx, cy)),
    }
}
