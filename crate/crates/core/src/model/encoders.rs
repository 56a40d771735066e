//! Modality encoders and the fusion encoder.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::bundle::FUSION_ENCODER;
use crate::model::{
    Modality, ModalitySample, ModelBundle, Net, SemanticVector, SourceMask, AUDIO_LEN, FEATURE_DIM,
    IMAGE_PIXELS, MAX_TOKENS, PAD, VOCAB,
};
use crate::nn::{Graph, Tensor, Var};

pub const AUDIO_BANDS: usize = 8;
const BINS_PER_BAND: usize = 4;

pub fn validate_sample(sample: &ModalitySample) -> Result<()> {
    match sample {
        ModalitySample::Image(px) => {
            if px.len() != IMAGE_PIXELS {
                return Err(Error::shape("image payload", &[px.len()], &[IMAGE_PIXELS]));
            }
            if let Some(v) = px.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("pixel {v} outside [0, 1]")));
            }
        }
        ModalitySample::Text(ids) => {
            if ids.is_empty() || ids.len() > MAX_TOKENS {
                return Err(Error::InvalidInput(format!(
                    "text has {} tokens, expected 1..={MAX_TOKENS}",
                    ids.len()
                )));
            }
            if let Some(id) = ids.iter().find(|id| **id >= VOCAB) {
                return Err(Error::InvalidInput(format!(
                    "token id {id} outside vocabulary of {VOCAB}"
                )));
            }
            if let Some(first_pad) = ids.iter().position(|&t| t == PAD) {
                if ids[first_pad..].iter().any(|&t| t != PAD) {
                    return Err(Error::InvalidInput(
                        "text padding must be at the tail".into(),
                    ));
                }
            }
        }
        ModalitySample::Audio(a) => {
            if a.len() != AUDIO_LEN {
                return Err(Error::shape("audio payload", &[a.len()], &[AUDIO_LEN]));
            }
            if let Some(v) = a.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!(
                    "audio sample {v} outside [-1, 1]"
                )));
            }
        }
    }
    Ok(())
}

/// Band energies of the one-sided DFT: bins 1..=32 in 8 groups of 4,
/// normalised so a unit-amplitude tone has energy 0.5.
pub fn audio_features(wave: &[f64]) -> [f64; AUDIO_BANDS] {
    let n = wave.len() as f64;
    let mut out = [0.0; AUDIO_BANDS];
    for (band, o) in out.iter_mut().enumerate() {
        for k in band * BINS_PER_BAND + 1..=(band + 1) * BINS_PER_BAND {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, x) in wave.iter().enumerate() {
                let ang = 2.0 * PI * (k * t) as f64 / n;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            *o += 2.0 * (re * re + im * im) / (n * n);
        }
    }
    out
}

/// Tokens before the first pad; a text of only pads keeps one.
fn content_tokens(ids: &[usize]) -> Vec<usize> {
    let end = ids
        .iter()
        .position(|&t| t == PAD)
        .unwrap_or(ids.len())
        .max(1);
    ids[..end].to_vec()
}

/// Validates a row of modality samples and returns them in canonical slots.
pub(crate) fn canonical(row: &[ModalitySample]) -> Result<[Option<&ModalitySample>; 3]> {
    if row.is_empty() {
        return Err(Error::InvalidInput(
            "at least one modality is required".into(),
        ));
    }
    let mut slots: [Option<&ModalitySample>; 3] = [None; 3];
    for s in row {
        validate_sample(s)?;
        let m = s.modality();
        if slots[m.slot()].replace(s).is_some() {
            return Err(Error::DuplicateModality(m.name()));
        }
    }
    Ok(slots)
}

fn mask_rows(g: &mut Graph, x: Var, present: &[bool]) -> Result<Var> {
    if present.iter().all(|p| *p) {
        return Ok(x);
    }
    let n = present.len();
    let mut m = vec![0.0; n * FEATURE_DIM];
    for (i, p) in present.iter().enumerate() {
        if *p {
            m[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].fill(1.0);
        }
    }
    let mv = g.constant(Tensor::matrix(n, FEATURE_DIM, m)?);
    g.mul(x, mv)
}

/// Runs all three modality encoders on a batch and concatenates their
/// outputs in canonical order. Absent modalities contribute exact zeros.
pub(crate) fn encode_rows(
    g: &mut Graph,
    net: Net,
    rows: &[Vec<ModalitySample>],
) -> Result<(Var, Vec<SourceMask>)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut img = vec![0.0; n * IMAGE_PIXELS];
    let mut ids = vec![vec![PAD]; n];
    let mut aud = vec![0.0; n * AUDIO_BANDS];
    let mut masks = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let slots = canonical(row)?;
        for s in slots.iter().flatten() {
            match s {
                ModalitySample::Image(px) => {
                    img[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS].copy_from_slice(px)
                }
                ModalitySample::Text(t) => ids[i] = content_tokens(t),
                ModalitySample::Audio(a) => {
                    aud[i * AUDIO_BANDS..(i + 1) * AUDIO_BANDS].copy_from_slice(&audio_features(a))
                }
            }
        }
        masks.push(slots.map(|s| s.is_some()));
    }

    let x = g.constant(Tensor::matrix(n, IMAGE_PIXELS, img)?);
    let h = net.dense_tanh(g, x, "enc.image.l1")?;
    let fi = net.dense_tanh(g, h, "enc.image.l2")?;

    let table = net.p.bind(g, "enc.text.emb.w")?;
    let e = g.embed_mean(table, ids)?;
    let ft = net.dense_tanh(g, e, "enc.text.l1")?;

    let a = g.constant(Tensor::matrix(n, AUDIO_BANDS, aud)?);
    let fa = net.dense_tanh(g, a, "enc.audio.l1")?;

    let mut parts = Vec::with_capacity(3);
    for (m, f) in Modality::ALL.into_iter().zip([fi, ft, fa]) {
        let present: Vec<bool> = masks.iter().map(|mk| mk[m.slot()]).collect();
        parts.push(mask_rows(g, f, &present)?);
    }
    Ok((g.concat_cols(&parts)?, masks))
}

/// Two adapter-equipped dense+tanh layers over the 96-wide concatenation.
pub(crate) fn fuse(g: &mut Graph, net: Net, x: Var) -> Result<Var> {
    let h = net.dense_tanh(g, x, FUSION_ENCODER[0])?;
    net.dense_tanh(g, h, FUSION_ENCODER[1])
}

/// Single-sample feature from one modality encoder.
pub fn encode_modality(sample: &ModalitySample, bundle: &ModelBundle) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (x, _) = encode_rows(
        &mut g,
        Net::new(&bundle.device, &bundle.dims),
        &[vec![sample.clone()]],
    )?;
    let slot = sample.modality().slot();
    let f = g.slice_cols(x, slot * FEATURE_DIM, FEATURE_DIM)?;
    Ok(g.value(f).data().to_vec())
}

/// Fuses precomputed per-modality features. List order does not matter.
pub fn fuse_semantics(
    features: &[(Modality, Vec<f64>)],
    bundle: &ModelBundle,
) -> Result<SemanticVector> {
    if features.is_empty() {
        return Err(Error::InvalidInput(
            "at least one modality is required".into(),
        ));
    }
    let mut x = vec![0.0; 3 * FEATURE_DIM];
    let mut mask = [false; 3];
    for (m, f) in features {
        if f.len() != FEATURE_DIM {
            return Err(Error::shape("fuse_semantics", &[f.len()], &[FEATURE_DIM]));
        }
        if std::mem::replace(&mut mask[m.slot()], true) {
            return Err(Error::DuplicateModality(m.name()));
        }
        x[m.slot() * FEATURE_DIM..(m.slot() + 1) * FEATURE_DIM].copy_from_slice(f);
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::matrix(1, 3 * FEATURE_DIM, x)?);
    let sv = fuse(&mut g, Net::new(&bundle.device, &bundle.dims), xv)?;
    SemanticVector::new(g.value(sv).data().to_vec(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::nn::RngHandle;

    fn bundle() -> ModelBundle {
        ModelBundle::init(ModelDims::default(), &RngHandle::new(5, 0))
    }

    fn tone(bin: usize, amp: f64) -> Vec<f64> {
        (0..AUDIO_LEN)
            .map(|t| amp * (2.0 * PI * (bin * t) as f64 / AUDIO_LEN as f64).sin())
            .collect()
    }

    #[test]
    fn zero_image_with_zero_params_gives_tanh_of_bias() {
        let mut b = ModelBundle::zeros(ModelDims::default());
        let bias: Vec<f64> = (0..FEATURE_DIM).map(|i| 0.05 * i as f64 - 0.4).collect();
        b.device
            .load_values([("enc.image.l2.b", &Tensor::vector(bias.clone()).unwrap())])
            .unwrap();
        let f = encode_modality(&ModalitySample::Image(vec![0.0; IMAGE_PIXELS]), &b).unwrap();
        let expected: Vec<f64> = bias.iter().map(|v| v.tanh()).collect();
        assert_eq!(f, expected);
    }

    #[test]
    fn all_pad_text_is_the_pad_embedding() {
        let b = bundle();
        let f = encode_modality(&ModalitySample::Text(vec![PAD; 5]), &b).unwrap();
        let mut g = Graph::new();
        let pad_row = g.constant(
            Tensor::matrix(
                1,
                FEATURE_DIM,
                b.device.get("enc.text.emb.w").unwrap().row(PAD).to_vec(),
            )
            .unwrap(),
        );
        let y = Net::new(&b.device, &b.dims)
            .dense_tanh(&mut g, pad_row, "enc.text.l1")
            .unwrap();
        for (a, c) in f.iter().zip(g.value(y).data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_repeatable() {
        let b = bundle();
        let s = ModalitySample::Audio(tone(5, 0.7));
        let first = encode_modality(&s, &b).unwrap();
        for _ in 0..10 {
            assert_eq!(encode_modality(&s, &b).unwrap(), first);
        }
    }

    #[test]
    fn invalid_payloads_rejected() {
        let b = bundle();
        assert!(encode_modality(&ModalitySample::Text(vec![64]), &b).is_err());
        assert!(encode_modality(&ModalitySample::Text(vec![3, 0, 4]), &b).is_err());
        let mut px = vec![0.5; IMAGE_PIXELS];
        px[3] = 1.5;
        assert!(encode_modality(&ModalitySample::Image(px), &b).is_err());
        assert!(encode_modality(&ModalitySample::Audio(vec![0.0; 10]), &b).is_err());
    }

    #[test]
    fn audio_band_energy_of_a_tone() {
        let f = audio_features(&tone(6, 1.0));
        assert!((f[1] - 0.5).abs() < 1e-12);
        assert!(f.iter().enumerate().all(|(i, v)| i == 1 || v.abs() < 1e-12));
    }

    #[test]
    fn fusion_canonical_order_and_duplicates() {
        let b = bundle();
        let fi: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let fa: Vec<f64> = (0..32).map(|i| (i as f64 * 0.11).cos()).collect();
        let x = fuse_semantics(
            &[(Modality::Image, fi.clone()), (Modality::Audio, fa.clone())],
            &b,
        )
        .unwrap();
        let y = fuse_semantics(
            &[(Modality::Audio, fa.clone()), (Modality::Image, fi.clone())],
            &b,
        )
        .unwrap();
        assert_eq!(x, y);
        assert_eq!(x.source_mask, [true, false, true]);
        assert!(matches!(
            fuse_semantics(&[(Modality::Image, fi.clone()), (Modality::Image, fi)], &b),
            Err(Error::DuplicateModality("image"))
        ));
    }

    #[test]
    fn absent_slots_are_zero_filled() {
        let b = bundle();
        let fi: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let single = fuse_semantics(&[(Modality::Image, fi.clone())], &b).unwrap();
        let explicit = fuse_semantics(
            &[
                (Modality::Image, fi),
                (Modality::Text, vec![0.0; 32]),
                (Modality::Audio, vec![0.0; 32]),
            ],
            &b,
        )
        .unwrap();
        assert_eq!(single.values, explicit.values);
    }

    #[test]
    fn zero_adapters_equal_frozen_base() {
        let base = bundle();
        let mut adapted = base.clone();
        adapted.attach_lora(&RngHandle::new(5, 1)).unwrap();
        let f: Vec<f64> = (0..32).map(|i| (i as f64 * 0.2).sin()).collect();
        let a = fuse_semantics(&[(Modality::Text, f.clone())], &base).unwrap();
        let c = fuse_semantics(&[(Modality::Text, f)], &adapted).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn batch_rows_match_single_samples() {
        let b = bundle();
        let rows = vec![
            vec![
                ModalitySample::Audio(tone(3, 0.5)),
                ModalitySample::Text(vec![2, 9, 11]),
            ],
            vec![ModalitySample::Image(vec![0.25; IMAGE_PIXELS])],
        ];
        let mut g = Graph::new();
        let (x, masks) = encode_rows(&mut g, Net::new(&b.device, &b.dims), &rows).unwrap();
        assert_eq!(masks, vec![[false, true, true], [true, false, false]]);
        let v = g.value(x);
        let text = encode_modality(&ModalitySample::Text(vec![2, 9, 11]), &b).unwrap();
        assert_eq!(&v.row(0)[32..64], text.as_slice());
        assert!(v.row(0)[..32].iter().all(|x| *x == 0.0));
        assert!(v.row(1)[32..].iter().all(|x| *x == 0.0));
    }
}
