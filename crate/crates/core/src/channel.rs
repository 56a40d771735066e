//! Wireless channel: power normalisation, Rician block fading with AWGN,
//! zero-forcing equalisation with perfect CSI.

use std::io::Write;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::RngHandle;

/// Below this |h| the receiver declares the transmission erased.
pub const ERASURE_THRESHOLD: f64 = 1e-12;
pub const DEFAULT_K_FACTOR: f64 = 3.0;

const NOISE_TAG: u64 = 0x006e_6f69_7365;
const FADING_TAG: u64 = 0x6661_6469_6e67;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FadingMode {
    /// A fresh coefficient for every transmission.
    Block,
    /// One coefficient shared by every transmission of this state.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelState {
    pub snr_db: f64,
    pub k_factor: f64,
    pub rng: RngHandle,
    pub fading_mode: FadingMode,
    /// Index of the transmission this state is applied to; selects the noise stream.
    pub transmission: u64,
}

impl ChannelState {
    /// `snr_db = +∞` is accepted and means a noise-free link (sigma2 = 0).
    pub fn new(snr_db: f64, k_factor: f64, rng: RngHandle) -> Result<Self> {
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidInput(format!(
                "snr_db must be finite or +inf, got {snr_db}"
            )));
        }
        if !(k_factor >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "k_factor must be non-negative, got {k_factor}"
            )));
        }
        Ok(Self {
            snr_db,
            k_factor,
            rng,
            fading_mode: FadingMode::Block,
            transmission: 0,
        })
    }

    pub fn with_fading(mut self, mode: FadingMode) -> Self {
        self.fading_mode = mode;
        self
    }

    pub fn for_transmission(mut self, id: u64) -> Self {
        self.transmission = id;
        self
    }

    pub fn noise_var(&self) -> f64 {
        snr_db_to_noise_var(self.snr_db, 1.0)
    }

    /// Draws the fading coefficient for this transmission.
    pub fn fading(&self) -> Complex64 {
        let handle = match self.fading_mode {
            FadingMode::Block => self.rng.derive_path(&[FADING_TAG, self.transmission]),
            FadingMode::Static => self.rng.derive(FADING_TAG),
        };
        rician(self.k_factor, &mut handle.rng())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComplexSymbolBlock {
    pub symbols: Vec<Complex64>,
}

impl ComplexSymbolBlock {
    pub fn new(symbols: Vec<Complex64>) -> Self {
        Self { symbols }
    }

    /// Pairs consecutive reals into symbols; `reals` must have even length.
    pub fn from_reals(reals: &[f64]) -> Result<Self> {
        if !reals.len().is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "odd real count {}",
                reals.len()
            )));
        }
        Ok(Self {
            symbols: reals
                .chunks_exact(2)
                .map(|c| Complex64::new(c[0], c[1]))
                .collect(),
        })
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.symbols.iter().flat_map(|s| [s.re, s.im]).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

pub fn total_symbols(blocks: &[ComplexSymbolBlock]) -> usize {
    blocks.iter().map(ComplexSymbolBlock::len).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub blocks: Vec<ComplexSymbolBlock>,
    /// Amplitude factor applied at the transmitter; the receiver divides by it.
    pub scale: f64,
    pub zero_power: bool,
}

/// Scales the whole transmission to unit average symbol power.
pub fn power_normalize(blocks: &[ComplexSymbolBlock]) -> Result<Normalized> {
    let n = total_symbols(blocks);
    if n == 0 {
        return Err(Error::InvalidInput(
            "power_normalize needs at least one symbol".into(),
        ));
    }
    let power: f64 = blocks
        .iter()
        .flat_map(|b| b.symbols.iter())
        .map(|s| s.norm_sqr())
        .sum::<f64>()
        / n as f64;
    if power == 0.0 {
        return Ok(Normalized {
            blocks: blocks.to_vec(),
            scale: 1.0,
            zero_power: true,
        });
    }
    let scale = 1.0 / power.sqrt();
    let blocks = blocks
        .iter()
        .map(|b| ComplexSymbolBlock::new(b.symbols.iter().map(|s| s * scale).collect()))
        .collect();
    Ok(Normalized {
        blocks,
        scale,
        zero_power: false,
    })
}

/// Total complex noise variance for the given SNR; each of I/Q gets half.
pub fn snr_db_to_noise_var(snr_db: f64, signal_power: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// `√(K/(K+1)) + √(1/(K+1))·g` with g ~ CN(0, 1). `K = ∞` is pure AWGN (h = 1).
pub fn rician<R: rand::Rng + ?Sized>(k_factor: f64, rng: &mut R) -> Complex64 {
    if k_factor == f64::INFINITY {
        return Complex64::new(1.0, 0.0);
    }
    let los = (k_factor / (k_factor + 1.0)).sqrt();
    let nlos = (1.0 / (k_factor + 1.0)).sqrt();
    let gr: f64 = StandardNormal.sample(rng);
    let gi: f64 = StandardNormal.sample(rng);
    Complex64::new(
        los + nlos * gr * std::f64::consts::FRAC_1_SQRT_2,
        nlos * gi * std::f64::consts::FRAC_1_SQRT_2,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutput {
    pub received: Vec<ComplexSymbolBlock>,
    pub h: Complex64,
    pub sigma2: f64,
}

/// `y = h·x + n` with one fading coefficient per transmission.
pub fn apply_channel(blocks: &[ComplexSymbolBlock], state: &ChannelState) -> ChannelOutput {
    let h = state.fading();
    let sigma2 = state.noise_var();
    let sd = (sigma2 / 2.0).sqrt();
    let mut rng = state
        .rng
        .derive_path(&[NOISE_TAG, state.transmission])
        .rng();
    let received = blocks
        .iter()
        .map(|b| {
            let symbols = b
                .symbols
                .iter()
                .map(|x| {
                    let nr: f64 = StandardNormal.sample(&mut rng);
                    let ni: f64 = StandardNormal.sample(&mut rng);
                    h * x + Complex64::new(sd * nr, sd * ni)
                })
                .collect();
            ComplexSymbolBlock::new(symbols)
        })
        .collect();
    ChannelOutput {
        received,
        h,
        sigma2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Equalized {
    Symbols(Vec<ComplexSymbolBlock>),
    /// |h| fell below [`ERASURE_THRESHOLD`]; downstream imputes zeros.
    Erased,
}

/// Zero-forcing `x̂ = y / h`.
pub fn equalize(received: &[ComplexSymbolBlock], h: Complex64) -> Equalized {
    if h.norm() < ERASURE_THRESHOLD {
        return Equalized::Erased;
    }
    Equalized::Symbols(
        received
            .iter()
            .map(|b| ComplexSymbolBlock::new(b.symbols.iter().map(|y| y / h).collect()))
            .collect(),
    )
}

/// Result of normalise → channel → equalise → rescale for one transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    /// Receiver estimate in the transmitter's original amplitude; `None` when erased.
    pub estimate: Option<Vec<ComplexSymbolBlock>>,
    pub h: Complex64,
    pub sigma2: f64,
    pub scale: f64,
}

/// Sends one transmission end to end. The power scale travels as side
/// information so the receiver can undo the normalisation. With `noiseless`
/// the channel is bypassed and the estimate equals the input.
pub fn transmit(
    blocks: &[ComplexSymbolBlock],
    state: &ChannelState,
    noiseless: bool,
) -> Result<Transmission> {
    if noiseless || total_symbols(blocks) == 0 {
        return Ok(Transmission {
            estimate: Some(blocks.to_vec()),
            h: Complex64::new(1.0, 0.0),
            sigma2: 0.0,
            scale: 1.0,
        });
    }
    let norm = power_normalize(blocks)?;
    let out = apply_channel(&norm.blocks, state);
    let estimate = match equalize(&out.received, out.h) {
        Equalized::Erased => None,
        Equalized::Symbols(b) => Some(
            b.into_iter()
                .map(|blk| {
                    ComplexSymbolBlock::new(blk.symbols.iter().map(|s| s / norm.scale).collect())
                })
                .collect(),
        ),
    };
    Ok(Transmission {
        estimate,
        h: out.h,
        sigma2: out.sigma2,
        scale: norm.scale,
    })
}

/// One row of an exported channel trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChannelTrace {
    pub sample_id: u64,
    pub h_re: f64,
    pub h_im: f64,
    pub sigma2: f64,
}

pub fn write_trace_csv<W: Write>(w: W, traces: &[ChannelTrace]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for t in traces {
        wr.serialize(t)?;
    }
    wr.flush()?;
    Ok(())
}
