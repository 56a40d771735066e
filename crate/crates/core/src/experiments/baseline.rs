//! Separate source and channel coding reference: 8-bit payload
//! quantisation, Gray-mapped QPSK with hard decisions, then the clean
//! semantic pipeline on the reconstructed input.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use statrs::function::erf::erfc;

use crate::channel::{transmit, ChannelState, ComplexSymbolBlock};
use crate::error::{Error, Result};
use crate::model::{
    forward_pipeline, AllocPolicy, ModalitySample, ModelBundle, PipelineOptions, PipelineOutput,
    TaskId, TxCondition, PAD, VOCAB,
};
use crate::transmission::MAX_BUDGET;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Raw payload bytes: pixels, token ids and audio samples, 8 bits each.
pub fn quantize_payload(inputs: &[ModalitySample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in inputs {
        match s {
            ModalitySample::Image(px) => out.extend(px.iter().map(|p| to_byte(*p))),
            ModalitySample::Text(ids) => out.extend(ids.iter().map(|t| *t as u8)),
            ModalitySample::Audio(a) => out.extend(a.iter().map(|v| to_byte((v + 1.0) / 2.0))),
        }
    }
    out
}

/// Inverse of [`quantize_payload`]. Modality order and lengths come from
/// `layout` (framing is assumed reliable). A decoded pad token ends the text.
pub fn dequantize_payload(layout: &[ModalitySample], bytes: &[u8]) -> Result<Vec<ModalitySample>> {
    let mut off = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(off..off + n).ok_or_else(|| {
            Error::InvalidInput(format!("payload of {} bytes is too short", bytes.len()))
        })?;
        off += n;
        Ok(s)
    };
    let out = layout
        .iter()
        .map(|s| {
            Ok(match s {
                ModalitySample::Image(px) => ModalitySample::Image(
                    take(px.len())?.iter().map(|b| *b as f64 / 255.0).collect(),
                ),
                ModalitySample::Text(ids) => {
                    let mut t: Vec<usize> = take(ids.len())?
                        .iter()
                        .map(|b| *b as usize % VOCAB)
                        .collect();
                    let end = t.iter().position(|x| *x == PAD).unwrap_or(t.len()).max(1);
                    t.truncate(end);
                    ModalitySample::Text(t)
                }
                ModalitySample::Audio(a) => ModalitySample::Audio(
                    take(a.len())?
                        .iter()
                        .map(|b| *b as f64 / 255.0 * 2.0 - 1.0)
                        .collect(),
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if off != bytes.len() {
        return Err(Error::InvalidInput(format!(
            "{} trailing payload bytes",
            bytes.len() - off
        )));
    }
    Ok(out)
}

/// Gray-mapped unit-energy QPSK, two bits per symbol, MSB first.
pub fn qpsk_modulate(bytes: &[u8]) -> Vec<Complex64> {
    let level = |bit: u8| {
        if bit == 0 {
            FRAC_1_SQRT_2
        } else {
            -FRAC_1_SQRT_2
        }
    };
    bytes
        .iter()
        .flat_map(|b| (0..4).rev().map(move |k| (b >> (2 * k)) & 0b11))
        .map(|pair| Complex64::new(level(pair >> 1), level(pair & 1)))
        .collect()
}

/// Hard-decision demodulation; a zero component decodes as bit 0.
pub fn qpsk_demodulate(symbols: &[Complex64]) -> Vec<u8> {
    symbols
        .chunks(4)
        .map(|c| {
            c.iter().fold(0u8, |acc, s| {
                let pair = (u8::from(s.re < 0.0) << 1) | u8::from(s.im < 0.0);
                (acc << 2) | pair
            })
        })
        .collect()
}

/// Bytes after one QPSK transmission over `link`, and the bit-error count.
/// An erased transmission decodes as all-zero bytes.
pub fn transmit_bytes(bytes: &[u8], link: &ChannelState) -> Result<(Vec<u8>, u64)> {
    let block = [ComplexSymbolBlock::new(qpsk_modulate(bytes))];
    let rx = transmit(&block, link, false)?;
    let out = match rx.estimate {
        Some(b) => qpsk_demodulate(&b[0].symbols),
        None => vec![0; bytes.len()],
    };
    let errors = bytes
        .iter()
        .zip(&out)
        .map(|(a, b)| (a ^ b).count_ones() as u64)
        .sum();
    Ok((out, errors))
}

/// Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Analytic Gray QPSK bit-error rate on AWGN at symbol SNR `snr_db`.
pub fn qpsk_ber_awgn(snr_db: f64) -> f64 {
    q_function(10f64.powf(snr_db / 10.0).sqrt())
}

/// `I0(x)·e^{-x}`: power series below 50, asymptotic expansion above.
fn bessel_i0_scaled(x: f64) -> f64 {
    if x >= 50.0 {
        let r = 1.0 / (8.0 * x);
        return (1.0 + r + 9.0 * r * r / 2.0 + 225.0 * r * r * r / 6.0)
            / (std::f64::consts::TAU * x).sqrt();
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = x * x / 4.0;
    for k in 1..400 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum * (-x).exp()
}

/// QPSK bit-error rate averaged over unit-power Rician fading with perfect
/// CSI, by Simpson integration over the Rice envelope density.
pub fn qpsk_ber_rician(snr_db: f64, k_factor: f64) -> f64 {
    if k_factor == f64::INFINITY {
        return qpsk_ber_awgn(snr_db);
    }
    let snr = 10f64.powf(snr_db / 10.0);
    let kp1 = k_factor + 1.0;
    let pdf = |r: f64| {
        let z = 2.0 * r * (k_factor * kp1).sqrt();
        2.0 * r * kp1 * (-k_factor - kp1 * r * r + z).exp() * bessel_i0_scaled(z)
    };
    let (hi, n) = (6.0, 6000);
    let h = hi / n as f64;
    let f = |r: f64| pdf(r) * q_function((snr * r * r).sqrt());
    let mut acc = f(0.0) + f(hi);
    for i in 1..n {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Per-batch outcome of the reference scheme.
#[derive(Clone, Debug)]
pub struct Baseline1Output {
    pub pipeline: PipelineOutput,
    pub bits: u64,
    pub bit_errors: u64,
}

/// Sends each row's raw payload over its own link (`links[i]`, transmission
/// id `i`), reconstructs it and runs the clean pipeline at full budget.
pub fn run_baseline1(
    bundle: &ModelBundle,
    rows: &[Vec<ModalitySample>],
    tasks: &[TaskId],
    links: &[ChannelState],
) -> Result<Baseline1Output> {
    if rows.len() != links.len() {
        return Err(Error::shape("run_baseline1", &[rows.len()], &[links.len()]));
    }
    let mut bits = 0;
    let mut bit_errors = 0;
    let mut received = Vec::with_capacity(rows.len());
    for (row, link) in rows.iter().zip(links) {
        let payload = quantize_payload(row);
        let (rx, e) = transmit_bytes(&payload, link)?;
        bits += 8 * payload.len() as u64;
        bit_errors += e;
        received.push(dequantize_payload(row, &rx)?);
    }
    let conds = vec![TxCondition::noiseless(MAX_BUDGET, AllocPolicy::Importance); rows.len()];
    let pipeline = forward_pipeline(
        bundle,
        &received,
        tasks,
        &conds,
        &PipelineOptions::default(),
    )?;
    Ok(Baseline1Output {
        pipeline,
        bits,
        bit_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, IMAGE_PIXELS};
    use crate::nn::RngHandle;

    fn row() -> Vec<ModalitySample> {
        vec![
            ModalitySample::Image(
                (0..IMAGE_PIXELS)
                    .map(|k| (k % 256) as f64 / 255.0)
                    .collect(),
            ),
            ModalitySample::Text(vec![3, 17, 42, 63]),
            ModalitySample::Audio((0..64).map(|t| (t as f64 * 0.3).sin()).collect()),
        ]
    }

    #[test]
    fn gray_mapping_and_round_trip() {
        let s = qpsk_modulate(&[0b00_01_11_10]);
        let a = FRAC_1_SQRT_2;
        assert_eq!(
            s,
            vec![
                Complex64::new(a, a),
                Complex64::new(a, -a),
                Complex64::new(-a, -a),
                Complex64::new(-a, a)
            ]
        );
        let bytes: Vec<u8> = (0..=255).collect();
        assert_eq!(qpsk_demodulate(&qpsk_modulate(&bytes)), bytes);
        assert!(qpsk_modulate(&bytes)
            .iter()
            .all(|s| (s.norm_sqr() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn payload_round_trip_is_within_half_a_step() {
        let r = row();
        let back = dequantize_payload(&r, &quantize_payload(&r)).unwrap();
        for (a, b) in r.iter().zip(&back) {
            match (a, b) {
                (ModalitySample::Image(x), ModalitySample::Image(y)) => {
                    assert!(x
                        .iter()
                        .zip(y)
                        .all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-12))
                }
                (ModalitySample::Text(x), ModalitySample::Text(y)) => assert_eq!(x, y),
                (ModalitySample::Audio(x), ModalitySample::Audio(y)) => {
                    assert!(x
                        .iter()
                        .zip(y)
                        .all(|(p, q)| (p - q).abs() <= 1.0 / 255.0 + 1e-12))
                }
                _ => panic!("modality order changed"),
            }
        }
        let mut bytes = quantize_payload(&r);
        bytes[IMAGE_PIXELS + 1] = 64;
        let ModalitySample::Text(t) = &dequantize_payload(&r, &bytes).unwrap()[1] else {
            panic!()
        };
        assert_eq!(t, &vec![3]);
    }

    #[test]
    fn analytic_ber_values() {
        let q1 = qpsk_ber_awgn(0.0);
        assert!((q1 - 0.158_655_253_931_457).abs() < 1e-10, "{q1}");
        assert!((q_function(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(qpsk_ber_rician(6.0, f64::INFINITY), qpsk_ber_awgn(6.0));
        assert!(
            (bessel_i0_scaled(49.999) / bessel_i0_scaled(50.0) - (50.0f64 / 49.999).sqrt()).abs()
                < 1e-7
        );
        // Rayleigh closed form ½(1 − √(γb/(1+γb))) with per-bit SNR γb = γ/2.
        let g = 10f64.powf(0.6) / 2.0;
        assert!((qpsk_ber_rician(6.0, 0.0) - 0.5 * (1.0 - (g / (1.0 + g)).sqrt())).abs() < 1e-7);
        let k3 = qpsk_ber_rician(6.0, 3.0);
        assert!(k3 > qpsk_ber_awgn(6.0) && k3 < qpsk_ber_rician(6.0, 0.0));
        assert!(qpsk_ber_rician(6.0, 20.0) < k3);
    }

    #[test]
    fn low_snr_corrupts_many_bits() {
        let payload: Vec<u8> = (0..20_000u32).map(|i| (i * 37 % 251) as u8).collect();
        let link = ChannelState::new(-6.0, f64::INFINITY, RngHandle::new(4, 4)).unwrap();
        let (_, e) = transmit_bytes(&payload, &link).unwrap();
        let ber = e as f64 / (8.0 * payload.len() as f64);
        assert!(ber > 0.2);
        assert!((ber / qpsk_ber_awgn(-6.0) - 1.0).abs() < 0.1, "{ber}");
    }

    #[test]
    fn noiseless_baseline_matches_clean_pipeline_up_to_quantisation() {
        let b = ModelBundle::init(ModelDims::default(), &RngHandle::new(2, 0));
        let rows = vec![row(); 2];
        let links = vec![ChannelState::new(f64::INFINITY, 3.0, RngHandle::new(5, 5)).unwrap(); 2];
        let out = run_baseline1(&b, &rows, &[TaskId::Classify], &links).unwrap();
        assert_eq!(out.bit_errors, 0);
        assert_eq!(out.bits, 2 * 8 * (256 + 4 + 64));
        let conds = vec![TxCondition::noiseless(MAX_BUDGET, AllocPolicy::Importance); 2];
        let clean = forward_pipeline(
            &b,
            &rows,
            &[TaskId::Classify],
            &conds,
            &PipelineOptions::default(),
        )
        .unwrap();
        let d =
            out.pipeline.outputs[&TaskId::Classify].max_abs_diff(&clean.outputs[&TaskId::Classify]);
        assert!(d < 0.05, "{d}");
    }
}
