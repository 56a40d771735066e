//! Protocol messages and their binary encoding.
//!
//! None of these types has a field that can hold raw samples or labels;
//! only symbols, representations, gradients and parameters cross the link.
//!
//! Trace records (little-endian):
//!
//! ```text
//! u8 tag  u32 client  u32 round  u32 len  payload[len]  '\n'
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::channel::ComplexSymbolBlock;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_f64, read_tensors, read_u32, write_tensors, write_u32};
use crate::nn::Tensor;
use crate::transmission::{RateAllocation, NUM_BLOCKS};

const FMT: &str = "protocol message";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    Activation = 1,
    Representation = 2,
    RepresentationGradient = 3,
    SymbolGradient = 4,
    Update = 5,
    Broadcast = 6,
}

impl MessageKind {
    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => Self::Activation,
            2 => Self::Representation,
            3 => Self::RepresentationGradient,
            4 => Self::SymbolGradient,
            5 => Self::Update,
            6 => Self::Broadcast,
            t => return Err(Error::format(FMT, format!("unknown tag {t}"))),
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

fn write_ids<W: Write>(w: &mut W, ids: &[u64]) -> Result<()> {
    write_u32(w, ids.len() as u32)?;
    for id in ids {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

fn read_ids<R: Read>(r: &mut R) -> Result<Vec<u64>> {
    let n = read_u32(r)? as usize;
    (0..n).map(|_| read_u64(r)).collect()
}

/// Device → server: transmitted symbols with their allocation side info.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMessage {
    pub sample_ids: Vec<u64>,
    pub allocs: Vec<RateAllocation>,
    /// Samples whose transmission hit a deep fade.
    pub erased: Vec<bool>,
    /// Per sample, one block per semantic block sized by its allocation.
    pub symbols: Vec<Vec<ComplexSymbolBlock>>,
}

impl ActivationMessage {
    pub fn validate(&self) -> Result<()> {
        let n = self.sample_ids.len();
        if self.allocs.len() != n || self.erased.len() != n || self.symbols.len() != n {
            return Err(Error::Protocol(
                "activation message has inconsistent batch sizes".into(),
            ));
        }
        for (a, blocks) in self.allocs.iter().zip(&self.symbols) {
            if blocks.len() != NUM_BLOCKS
                || blocks.iter().zip(&a.s).any(|(b, s)| b.len() != *s as usize)
            {
                return Err(Error::AllocationMismatch(
                    "symbol blocks disagree with side info".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        write_ids(&mut w, &self.sample_ids).expect("vec write");
        for ((a, e), blocks) in self.allocs.iter().zip(&self.erased).zip(&self.symbols) {
            w.push(*e as u8);
            w.extend(a.to_side_info());
            for b in blocks {
                write_f64s(&mut w, &b.to_reals()).expect("vec write");
            }
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let sample_ids = read_ids(r)?;
        let n = sample_ids.len();
        let (mut allocs, mut erased, mut symbols) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for _ in 0..n {
            erased.push(read_u8(r)? != 0);
            let mut side = [0u8; 2 * NUM_BLOCKS];
            r.read_exact(&mut side)?;
            let a = RateAllocation::from_side_info(&side)?;
            let blocks =
                a.s.iter()
                    .map(|s| ComplexSymbolBlock::from_reals(&read_f64s(r, 2 * *s as usize)?))
                    .collect::<Result<Vec<_>>>()?;
            allocs.push(a);
            symbols.push(blocks);
        }
        let m = Self {
            sample_ids,
            allocs,
            erased,
            symbols,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Server → device: fusion decoder output for each sample (n × 32).
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationMessage {
    pub sample_ids: Vec<u64>,
    pub rep: Tensor,
}

/// A gradient travelling back across the split.
#[derive(Clone, Debug, PartialEq)]
pub enum GradientMessage {
    /// Device → server: dLoss/d(representation), n × 32.
    Representation { sample_ids: Vec<u64>, grad: Tensor },
    /// Server → device: dLoss/d(received symbols), laid out like the
    /// activation message (real and imaginary parts interleaved).
    Symbols {
        sample_ids: Vec<u64>,
        grad: Vec<Vec<f64>>,
    },
}

fn encode_matrix(ids: &[u64], t: &Tensor) -> Vec<u8> {
    let mut w = Vec::new();
    write_ids(&mut w, ids).expect("vec write");
    write_u32(&mut w, t.cols() as u32).expect("vec write");
    write_f64s(&mut w, t.data()).expect("vec write");
    w
}

fn decode_matrix(bytes: &[u8]) -> Result<(Vec<u64>, Tensor)> {
    let r = &mut &bytes[..];
    let ids = read_ids(r)?;
    let cols = read_u32(r)? as usize;
    let data = read_f64s(r, ids.len() * cols)?;
    Ok((ids.clone(), Tensor::matrix(ids.len(), cols, data)?))
}

impl RepresentationMessage {
    pub fn encode(&self) -> Vec<u8> {
        encode_matrix(&self.sample_ids, &self.rep)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (sample_ids, rep) = decode_matrix(bytes)?;
        Ok(Self { sample_ids, rep })
    }
}

impl GradientMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            GradientMessage::Representation { .. } => MessageKind::RepresentationGradient,
            GradientMessage::Symbols { .. } => MessageKind::SymbolGradient,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            GradientMessage::Representation { grad, .. } => grad.is_finite(),
            GradientMessage::Symbols { grad, .. } => grad.iter().flatten().all(|v| v.is_finite()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            GradientMessage::Representation { sample_ids, grad } => encode_matrix(sample_ids, grad),
            GradientMessage::Symbols { sample_ids, grad } => {
                let mut w = Vec::new();
                write_ids(&mut w, sample_ids).expect("vec write");
                for row in grad {
                    write_u32(&mut w, row.len() as u32).expect("vec write");
                    write_f64s(&mut w, row).expect("vec write");
                }
                w
            }
        }
    }

    pub fn decode(kind: MessageKind, bytes: &[u8]) -> Result<Self> {
        match kind {
            MessageKind::RepresentationGradient => {
                let (sample_ids, grad) = decode_matrix(bytes)?;
                Ok(GradientMessage::Representation { sample_ids, grad })
            }
            MessageKind::SymbolGradient => {
                let r = &mut &bytes[..];
                let sample_ids = read_ids(r)?;
                let grad = (0..sample_ids.len())
                    .map(|_| {
                        let n = read_u32(r)? as usize;
                        read_f64s(r, n)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GradientMessage::Symbols { sample_ids, grad })
            }
            k => Err(Error::Protocol(format!("{k:?} is not a gradient message"))),
        }
    }
}

/// Device → server at round end: every device-side trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMessage {
    pub client_id: u32,
    pub sample_count: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl UpdateMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        write_u32(&mut w, self.client_id).expect("vec write");
        w.extend(self.sample_count.to_le_bytes());
        write_tensors(&mut w, self.tensors.iter().map(|(k, v)| (k.as_str(), v)))
            .expect("vec write");
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let r = &mut &bytes[..];
        let client_id = read_u32(r)?;
        let sample_count = read_u64(r)?;
        let tensors = read_tensors(r)?.into_iter().collect();
        Ok(Self {
            client_id,
            sample_count,
            tensors,
        })
    }
}

/// Encodes a tensor map (used for the aggregated broadcast).
pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut w = Vec::new();
    write_tensors(&mut w, tensors.iter().map(|(k, v)| (k.as_str(), v))).expect("vec write");
    w
}

/// One protocol message as recorded in a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub kind: MessageKind,
    pub client: u32,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl TraceRecord {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&[self.kind as u8])?;
        write_u32(w, self.client)?;
        write_u32(w, self.round)?;
        write_u32(w, self.payload.len() as u32)?;
        w.write_all(&self.payload)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_trace(bytes: &[u8]) -> Result<Vec<TraceRecord>> {
    let r = &mut &bytes[..];
    let mut out = Vec::new();
    while !r.is_empty() {
        let kind = MessageKind::from_tag(read_u8(r)?)?;
        let client = read_u32(r)?;
        let round = read_u32(r)?;
        let len = read_u32(r)? as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        if read_u8(r)? != b'\n' {
            return Err(Error::format("trace", "missing record terminator"));
        }
        out.push(TraceRecord {
            kind,
            client,
            round,
            payload,
        });
    }
    Ok(out)
}
