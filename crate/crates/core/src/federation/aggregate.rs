//! Weighted parameter averaging.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;

const WEIGHT_TOL: f64 = 1e-9;

/// Checks that weights are finite, non-negative and sum to one.
pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("no aggregation weights".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidInput(format!(
            "aggregation weight {w} is not a non-negative number"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidInput(format!(
            "aggregation weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Weights proportional to local dataset sizes.
pub fn weights_from_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput(
            "all clients have empty datasets".into(),
        ));
    }
    Ok(counts.iter().map(|c| *c as f64 / total as f64).collect())
}

/// Parameter-wise weighted mean of client tensors, `models[k]` belonging to
/// client `k`.
///
/// Computed as `base + Σ_k w_k·(p_k − base)` in ascending client order, where
/// `base` is the heaviest client (lowest index on ties), then clamped to the
/// range spanned by the clients with positive weight. Identical inputs and
/// one-hot weights therefore reproduce a client exactly.
pub fn aggregate(
    models: &[&BTreeMap<String, Tensor>],
    weights: &[f64],
) -> Result<BTreeMap<String, Tensor>> {
    if models.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} updates but {} weights",
            models.len(),
            weights.len()
        )));
    }
    validate_weights(weights)?;
    let first = models[0];
    for (k, m) in models.iter().enumerate().skip(1) {
        if let Some(name) = first.keys().find(|n| !m.contains_key(*n)) {
            return Err(Error::InvalidInput(format!(
                "client {k} update is missing tensor '{name}'"
            )));
        }
        if let Some(name) = m.keys().find(|n| !first.contains_key(*n)) {
            return Err(Error::InvalidInput(format!(
                "client {k} update has unexpected tensor '{name}'"
            )));
        }
        for (name, t) in m.iter() {
            if t.shape() != first[name].shape() {
                return Err(Error::InvalidInput(format!(
                    "tensor '{name}' has shape {:?} for client {k}, expected {:?}",
                    t.shape(),
                    first[name].shape()
                )));
            }
        }
    }
    let base_idx = (0..weights.len()).fold(
        0,
        |best, k| if weights[k] > weights[best] { k } else { best },
    );
    let active: Vec<usize> = (0..weights.len()).filter(|k| weights[*k] > 0.0).collect();
    let mut out = BTreeMap::new();
    for (name, base) in models[base_idx].iter() {
        let mut data = base.data().to_vec();
        for (j, v) in data.iter_mut().enumerate() {
            let b = *v;
            let mut acc = b;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &k in &active {
                let p = models[k][name].data()[j];
                acc += weights[k] * (p - b);
                lo = lo.min(p);
                hi = hi.max(p);
            }
            *v = acc.clamp(lo, hi);
        }
        out.insert(name.clone(), Tensor::new(base.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(vals: &[f64]) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), Tensor::vector(vals.to_vec()).unwrap());
        m
    }

    #[test]
    fn spec_examples() {
        let a = model(&[0.0]);
        let b = model(&[2.0]);
        assert_eq!(
            aggregate(&[&a, &b], &[0.5, 0.5]).unwrap()["a.w"].data(),
            &[1.0]
        );
        assert_eq!(aggregate(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        let c = model(&[0.1, -7.3]);
        assert_eq!(aggregate(&[&c, &c, &c], &[0.2, 0.3, 0.5]).unwrap(), c);
    }

    #[test]
    fn mismatches_name_the_tensor() {
        let a = model(&[0.0]);
        let mut b = model(&[0.0, 1.0]);
        let err = aggregate(&[&a, &b], &[0.5, 0.5]).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{err}");
        b.clear();
        b.insert("z.b".into(), Tensor::scalar(0.0));
        let err = aggregate(&[&a, &b], &[0.5, 0.5]).unwrap_err().to_string();
        assert!(err.contains("a.w"), "{err}");
        assert!(aggregate(&[&a, &a], &[0.6, 0.6]).is_err());
        assert!(aggregate(&[&a, &a], &[1.5, -0.5]).is_err());
    }

    fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|raw| {
            let s: f64 = raw.iter().sum::<f64>() + 1e-3;
            let mut w: Vec<f64> = raw.iter().map(|r| r / s).collect();
            let rest = 1.0 - w.iter().sum::<f64>();
            w[0] += rest;
            w
        })
    }

    proptest! {
        #[test]
        fn linearity(u in prop::collection::vec(-5.0f64..5.0, 3), v in prop::collection::vec(-5.0f64..5.0, 3),
                     x in prop::collection::vec(-5.0f64..5.0, 3), y in prop::collection::vec(-5.0f64..5.0, 3),
                     alpha in 0.0f64..1.0, w in weights(2)) {
            let mix = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect() };
            let (mu, mv) = (model(&mix(&u, &x)), model(&mix(&v, &y)));
            let lhs = aggregate(&[&mu, &mv], &w).unwrap();
            let au = aggregate(&[&model(&u), &model(&v)], &w).unwrap();
            let ax = aggregate(&[&model(&x), &model(&y)], &w).unwrap();
            for j in 0..3 {
                let rhs = alpha * au["a.w"].data()[j] + (1.0 - alpha) * ax["a.w"].data()[j];
                prop_assert!((lhs["a.w"].data()[j] - rhs).abs() < 1e-9);
            }
        }
    }
}
