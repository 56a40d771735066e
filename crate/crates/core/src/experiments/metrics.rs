//! Task metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::PAD;

/// Returned when the reconstruction is exact.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(max_val² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn compute_psnr(reference: &[f64], test: &[f64], max_val: f64) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::shape(
            "compute_psnr",
            &[reference.len()],
            &[test.len()],
        ));
    }
    if reference.is_empty() {
        return Err(Error::InvalidInput("psnr of empty images".into()));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// Unigram clipped precision times the brevity penalty.
pub fn compute_bleu1(candidate: &[usize], reference: &[usize]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in reference {
        *counts.entry(*t).or_default() += 1;
    }
    let mut hits = 0;
    for t in candidate {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    let precision = hits as f64 / candidate.len() as f64;
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64)
        .min(0.0)
        .exp();
    precision * bp
}

/// Caption slots with padding removed.
pub fn strip_pad(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|t| *t != PAD).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 16];
        assert_eq!(compute_psnr(&a, &a, 1.0).unwrap(), 99.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((compute_psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c: Vec<f64> = a.iter().map(|v| v - 0.5).collect();
        assert!((compute_psnr(&a, &c, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        assert!(compute_psnr(&a, &a[..3], 1.0).is_err());
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(compute_bleu1(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(compute_bleu1(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(compute_bleu1(&[1, 2], &[1, 3]), 0.5);
        assert_eq!(compute_bleu1(&[], &[1]), 0.0);
        // Clipping: a repeated correct word counts once per reference occurrence.
        assert_eq!(compute_bleu1(&[7, 7, 7, 7], &[7, 1, 2, 3]), 0.25);
        // Brevity: one right word against a four-word reference.
        assert!((compute_bleu1(&[1], &[1, 2, 3, 4]) - (-3.0f64).exp()).abs() < 1e-15);
    }

    fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut se = 0.0;
        for i in 0..a.len() {
            se += (a[i] - b[i]).powi(2);
        }
        if se == 0.0 {
            99.0
        } else {
            (-10.0 * (se / a.len() as f64).log10()).min(99.0)
        }
    }

    fn bleu_oracle(c: &[usize], r: &[usize]) -> f64 {
        if c.is_empty() {
            return 0.0;
        }
        let mut used = vec![false; r.len()];
        let mut m = 0.0;
        for t in c {
            if let Some(j) = (0..r.len()).find(|j| !used[*j] && r[*j] == *t) {
                used[j] = true;
                m += 1.0;
            }
        }
        let bp = if c.len() >= r.len() {
            1.0
        } else {
            (1.0 - r.len() as f64 / c.len() as f64).exp()
        };
        bp * m / c.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn psnr_matches_oracle(a in prop::collection::vec(0.0f64..1.0, 1..64), noise in prop::collection::vec(-0.3f64..0.3, 64)) {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| (x + n).clamp(0.0, 1.0)).collect();
            prop_assert!((compute_psnr(&a, &b, 1.0).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn bleu_matches_oracle(c in prop::collection::vec(0usize..6, 0..10), r in prop::collection::vec(0usize..6, 1..10)) {
            let v = compute_bleu1(&c, &r);
            prop_assert!((v - bleu_oracle(&c, &r)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
