//! Magnitude pruning, symmetric uniform quantisation and per-client plan
//! selection over a 4 × 4 grid of (prune rate, bit width).
//!
//! Cost model for `n` parameters of which `n_w` are prunable weights:
//!
//! ```text
//! kept      = n − ⌈rate·n_w⌉
//! mem_bytes = ⌈(kept·bits + mask_bits) / 8⌉,  mask_bits = n_w if rate > 0 else 0
//! mac       = ⌈Σ_dense rows·cols · (1 − rate)⌉
//! ```
//!
//! The plan objective is lexicographic: fewest MACs, then highest accuracy,
//! then fewest bits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{
    read_f64, read_str, read_tensors, read_u32, write_str, write_tensors, write_u32,
};
use crate::nn::ParamStore;

pub const PRUNE_RATES: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
pub const QUANT_BITS: [u8; 4] = [4, 8, 16, 32];
const SECTION_MAGIC: &[u8; 4] = b"QSEC";

/// Tensors excluded from the MAC count (lookups, not multiplies).
const EMBEDDINGS: [&str; 1] = ["enc.text.emb.w"];

pub fn is_weight(name: &str) -> bool {
    !name.ends_with(".b")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub mem_budget_bytes: u64,
    pub compute_budget_mac: u64,
    pub min_accuracy: f64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.mem_budget_bytes == 0 || self.compute_budget_mac == 0 {
            return Err(Error::InvalidInput(
                "client budgets must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_accuracy) {
            return Err(Error::InvalidInput(format!(
                "min_accuracy {} outside [0, 1]",
                self.min_accuracy
            )));
        }
        Ok(())
    }

    pub fn unlimited(min_accuracy: f64) -> Self {
        Self {
            mem_budget_bytes: u64::MAX,
            compute_budget_mac: u64::MAX,
            min_accuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub prune_rate: f64,
    pub quant_bits: u8,
}

impl CompressionPlan {
    pub fn new(prune_rate: f64, quant_bits: u8) -> Result<Self> {
        if !PRUNE_RATES.contains(&prune_rate) {
            return Err(Error::InvalidInput(format!(
                "prune rate {prune_rate} not in {PRUNE_RATES:?}"
            )));
        }
        if !QUANT_BITS.contains(&quant_bits) {
            return Err(Error::InvalidInput(format!(
                "bit width {quant_bits} not in {QUANT_BITS:?}"
            )));
        }
        Ok(Self {
            prune_rate,
            quant_bits,
        })
    }

    pub fn none() -> Self {
        Self {
            prune_rate: 0.0,
            quant_bits: 32,
        }
    }

    /// All 16 plans, rate-major.
    pub fn grid() -> Vec<Self> {
        PRUNE_RATES
            .iter()
            .flat_map(|&r| {
                QUANT_BITS.iter().map(move |&b| Self {
                    prune_rate: r,
                    quant_bits: b,
                })
            })
            .collect()
    }
}

fn prune_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).ceil() as usize).min(n)
}

/// Kept-entry masks for every weight tensor.
pub type PruneMask = BTreeMap<String, Vec<bool>>;

/// Zeroes the ⌈rate·n⌉ smallest-magnitude weights across all weight tensors
/// (biases exempt). Ties go to the lower (tensor name, flat index).
pub fn prune_magnitude(params: &ParamStore, rate: f64) -> Result<(ParamStore, PruneMask)> {
    CompressionPlan::new(rate, 32)?;
    let mut entries: Vec<(f64, &str, usize)> = params
        .iter()
        .filter(|(n, _)| is_weight(n))
        .flat_map(|(n, p)| {
            p.tensor
                .data()
                .iter()
                .enumerate()
                .map(move |(i, v)| (v.abs(), n, i))
        })
        .collect();
    let k = prune_count(rate, entries.len());
    let cmp = |a: &(f64, &str, usize), b: &(f64, &str, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
    };
    if k > 0 && k < entries.len() {
        entries.select_nth_unstable_by(k - 1, cmp);
    }
    let mut mask: PruneMask = params
        .iter()
        .filter(|(n, _)| is_weight(n))
        .map(|(n, p)| (n.to_string(), vec![true; p.tensor.len()]))
        .collect();
    for (_, name, i) in entries.iter().take(k) {
        mask.get_mut(*name).expect("weight present")[*i] = false;
    }
    let mut out = params.clone();
    for (name, keep) in &mask {
        let t = out.get_mut(name)?;
        for (v, k) in t.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok((out, mask))
}

fn qmax(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Symmetric per-tensor codes. The largest magnitude maps to ±(2^(bits−1) − 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub codes: Vec<i32>,
    pub bits: u8,
    pub max_abs: f64,
}

impl Quantized {
    /// `max|w| / (2^(bits−1) − 1)`; zero for an all-zero tensor.
    pub fn scale(&self) -> f64 {
        self.max_abs / qmax(self.bits) as f64
    }
}

pub fn quantize_uniform(values: &[f64], bits: u8) -> Result<Quantized> {
    if ![4, 8, 16].contains(&bits) {
        return Err(Error::InvalidInput(format!(
            "quantisation needs 4, 8 or 16 bits, got {bits}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantisation input".into()));
    }
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let q = qmax(bits);
    let codes = if max_abs == 0.0 {
        vec![0; values.len()]
    } else {
        let scale = max_abs / q as f64;
        values
            .iter()
            .map(|v| ((v / scale).round() as i64).clamp(-q, q) as i32)
            .collect()
    };
    Ok(Quantized {
        codes,
        bits,
        max_abs,
    })
}

/// Codes back to values as `(code / qmax) · max|w|`, so the extreme codes
/// reproduce ±max|w| exactly and zero codes give exact zeros.
pub fn dequantize(q: &Quantized) -> Vec<f64> {
    let qm = qmax(q.bits) as f64;
    q.codes
        .iter()
        .map(|&c| (c as f64 / qm) * q.max_abs)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub mem_bytes: u64,
    pub mac: u64,
}

pub fn estimate_cost(params: &ParamStore, plan: &CompressionPlan) -> Cost {
    let n: usize = params.num_scalars();
    let n_w: usize = params
        .iter()
        .filter(|(k, _)| is_weight(k))
        .map(|(_, p)| p.tensor.len())
        .sum();
    let kept = n - prune_count(plan.prune_rate, n_w);
    let mask_bits = if plan.prune_rate > 0.0 { n_w } else { 0 };
    let bits = kept as u128 * plan.quant_bits as u128 + mask_bits as u128;
    let dense: usize = params
        .iter()
        .filter(|(k, p)| is_weight(k) && p.tensor.shape().len() == 2 && !EMBEDDINGS.contains(k))
        .map(|(_, p)| p.tensor.len())
        .sum();
    Cost {
        mem_bytes: bits.div_ceil(8) as u64,
        mac: (dense as f64 * (1.0 - plan.prune_rate)).ceil() as u64,
    }
}

/// Per-tensor storage record of a compressed model.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub bits: u8,
    /// `max|w|` of the stored tensor; the scale is derived from it.
    pub max_abs: f64,
    pub mask: Option<Vec<bool>>,
}

impl TensorRecord {
    pub fn scale(&self) -> f64 {
        if self.bits >= 32 {
            0.0
        } else {
            self.max_abs / qmax(self.bits) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub plan: CompressionPlan,
    /// Dequantised values, ready to run.
    pub params: ParamStore,
    pub records: BTreeMap<String, TensorRecord>,
}

pub fn compress(params: &ParamStore, plan: &CompressionPlan) -> Result<CompressedModel> {
    let (mut pruned, mask) = prune_magnitude(params, plan.prune_rate)?;
    let mut records = BTreeMap::new();
    let names: Vec<String> = pruned.names().map(str::to_string).collect();
    for name in names {
        let t = pruned.get_mut(&name)?;
        let max_abs = t.max_abs();
        if plan.quant_bits < 32 {
            let q = quantize_uniform(t.data(), plan.quant_bits)?;
            t.data_mut().copy_from_slice(&dequantize(&q));
        }
        let m = (plan.prune_rate > 0.0)
            .then(|| mask.get(&name).cloned())
            .flatten();
        records.insert(
            name,
            TensorRecord {
                bits: plan.quant_bits,
                max_abs,
                mask: m,
            },
        );
    }
    Ok(CompressedModel {
        plan: *plan,
        params: pruned,
        records,
    })
}

impl CompressedModel {
    /// MTSC1 tensor directory followed by a `QSEC` section:
    /// `f64 prune_rate, u8 bits, u32 count`, then per tensor
    /// `name, u8 bits, f64 max_abs, u32 mask_len, mask bitmap (LSB first)`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_tensors(w, self.params.iter().map(|(n, p)| (n, &p.tensor)))?;
        w.write_all(SECTION_MAGIC)?;
        w.write_all(&self.plan.prune_rate.to_le_bytes())?;
        w.write_all(&[self.plan.quant_bits])?;
        write_u32(w, self.records.len() as u32)?;
        for (name, r) in &self.records {
            write_str(w, name)?;
            w.write_all(&[r.bits])?;
            w.write_all(&r.max_abs.to_le_bytes())?;
            match &r.mask {
                None => write_u32(w, 0)?,
                Some(m) => {
                    write_u32(w, m.len() as u32)?;
                    let mut bytes = vec![0u8; m.len().div_ceil(8)];
                    for (i, k) in m.iter().enumerate() {
                        if *k {
                            bytes[i / 8] |= 1 << (i % 8);
                        }
                    }
                    w.write_all(&bytes)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        for (n, t) in read_tensors(r)? {
            params.insert(n, t, false);
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SECTION_MAGIC {
            return Err(Error::format("QSEC", "missing quantisation section"));
        }
        let rate = read_f64(r)?;
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        let plan = CompressionPlan::new(rate, b[0])?;
        let count = read_u32(r)? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name = read_str(r, "QSEC")?;
            r.read_exact(&mut b)?;
            let bits = b[0];
            let max_abs = read_f64(r)?;
            let len = read_u32(r)? as usize;
            let mask = if len == 0 {
                None
            } else {
                let mut bytes = vec![0u8; len.div_ceil(8)];
                r.read_exact(&mut bytes)?;
                Some((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
            };
            records.insert(
                name,
                TensorRecord {
                    bits,
                    max_abs,
                    mask,
                },
            );
        }
        Ok(Self {
            plan,
            params,
            records,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanDecision {
    pub plan: CompressionPlan,
    pub accuracy: f64,
    pub cost: Cost,
    /// False when no budget-feasible plan reached `min_accuracy` and the
    /// most accurate feasible plan was returned instead.
    pub accuracy_floor_met: bool,
}

/// Exhaustive search over the plan grid. `eval` scores a compressed model;
/// it is only called for plans that fit the budgets.
pub fn optimize_plan<F>(
    profile: &ClientProfile,
    params: &ParamStore,
    mut eval: F,
) -> Result<PlanDecision>
where
    F: FnMut(&CompressedModel) -> Result<f64>,
{
    profile.validate()?;
    let mut fits = Vec::new();
    for plan in CompressionPlan::grid() {
        let cost = estimate_cost(params, &plan);
        if cost.mem_bytes <= profile.mem_budget_bytes && cost.mac <= profile.compute_budget_mac {
            let acc = eval(&compress(params, &plan)?)?;
            fits.push(PlanDecision {
                plan,
                accuracy: acc,
                cost,
                accuracy_floor_met: acc >= profile.min_accuracy,
            });
        }
    }
    if fits.is_empty() {
        return Err(Error::Infeasible);
    }
    let by_objective = |a: &&PlanDecision, b: &&PlanDecision| {
        a.cost
            .mac
            .cmp(&b.cost.mac)
            .then(b.accuracy.total_cmp(&a.accuracy))
            .then(a.plan.quant_bits.cmp(&b.plan.quant_bits))
    };
    if let Some(best) = fits
        .iter()
        .filter(|d| d.accuracy_floor_met)
        .min_by(by_objective)
    {
        return Ok(best.clone());
    }
    let best = fits
        .iter()
        .min_by(|a, b| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then_with(|| by_objective(a, b))
        })
        .expect("non-empty");
    Ok(best.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{RngHandle, Tensor};
    use proptest::prelude::*;

    fn store(tensors: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, v) in tensors {
            p.insert(*n, Tensor::vector(v.clone()).unwrap(), false);
        }
        p
    }

    #[test]
    fn pruning_examples() {
        let p = store(&[("l.w", vec![0.1, -0.5, 0.3, 0.05]), ("l.b", vec![0.0001])]);
        let (same, _) = prune_magnitude(&p, 0.0).unwrap();
        assert_eq!(same, p);
        let (half, mask) = prune_magnitude(&p, 0.5).unwrap();
        assert_eq!(half.get("l.w").unwrap().data(), &[0.0, -0.5, 0.3, 0.0]);
        assert_eq!(half.get("l.b").unwrap().data(), &[0.0001]);
        assert_eq!(mask["l.w"], vec![false, true, true, false]);
        let (most, _) = prune_magnitude(&p, 0.75).unwrap();
        assert_eq!(
            most.get("l.w")
                .unwrap()
                .data()
                .iter()
                .filter(|v| **v == 0.0)
                .count(),
            3
        );
        assert!(prune_magnitude(&p, 0.3).is_err());
    }

    #[test]
    fn pruning_ties_follow_name_then_index() {
        let p = store(&[("b.w", vec![1.0, 1.0]), ("a.w", vec![1.0, 1.0])]);
        let (_, mask) = prune_magnitude(&p, 0.25).unwrap();
        assert_eq!(mask["a.w"], vec![false, true]);
        assert_eq!(mask["b.w"], vec![true, true]);
    }

    #[test]
    fn quantisation_examples() {
        let q = quantize_uniform(&[-1.0, 0.5], 8).unwrap();
        assert_eq!(q.scale(), 1.0 / 127.0);
        assert_eq!(q.codes, vec![-127, 64]);
        let d = dequantize(&q);
        assert_eq!(d[0], -1.0);
        assert!((d[1] - 0.503937).abs() < 5e-7);
        let z = quantize_uniform(&[0.0; 3], 4).unwrap();
        assert_eq!((z.scale(), z.codes.clone()), (0.0, vec![0, 0, 0]));
        assert_eq!(dequantize(&z), vec![0.0; 3]);
        assert!(quantize_uniform(&[1.0], 32).is_err());
    }

    #[test]
    fn cost_examples() {
        let p = store(&[("l.w", vec![0.5; 100])]);
        let full = estimate_cost(&p, &CompressionPlan::none());
        assert_eq!(full.mem_bytes, 400);
        let half = estimate_cost(&p, &CompressionPlan::new(0.5, 8).unwrap());
        assert_eq!(half.mem_bytes, 63);
        let mut m = ParamStore::new();
        m.insert("l.w", Tensor::zeros(&[10, 10]), false);
        let a = estimate_cost(&m, &CompressionPlan::none()).mac;
        let b = estimate_cost(&m, &CompressionPlan::new(0.5, 32).unwrap()).mac;
        assert_eq!((a, b), (100, 50));
    }

    #[test]
    fn plan_search_examples() {
        let mut p = ParamStore::new();
        p.insert("l.w", Tensor::full(&[10, 10], 0.5), false);
        let unlimited = optimize_plan(&ClientProfile::unlimited(0.0), &p, |_| Ok(0.9)).unwrap();
        assert_eq!(unlimited.plan, CompressionPlan::new(0.75, 4).unwrap());

        let only_full = ClientProfile {
            mem_budget_bytes: 400,
            compute_budget_mac: u64::MAX,
            min_accuracy: 0.0,
        };
        let tight = ClientProfile {
            compute_budget_mac: 100,
            ..only_full
        };
        // mem 400 admits (0, 32) and every smaller plan; restrict MACs to 100
        // and accuracy to rule out everything but the uncompressed model.
        let d = optimize_plan(
            &ClientProfile {
                min_accuracy: 0.95,
                ..tight
            },
            &p,
            |c| {
                Ok(if c.plan == CompressionPlan::none() {
                    0.99
                } else {
                    0.5
                })
            },
        )
        .unwrap();
        assert_eq!(d.plan, CompressionPlan::none());
        assert!(d.accuracy_floor_met);

        let none = ClientProfile {
            mem_budget_bytes: 10,
            compute_budget_mac: 1,
            min_accuracy: 0.0,
        };
        assert!(matches!(
            optimize_plan(&none, &p, |_| Ok(1.0)),
            Err(Error::Infeasible)
        ));

        let floor = optimize_plan(&ClientProfile::unlimited(0.99), &p, |c| {
            Ok(c.plan.quant_bits as f64 / 100.0)
        })
        .unwrap();
        assert!(!floor.accuracy_floor_met);
        assert_eq!(floor.plan, CompressionPlan::new(0.75, 32).unwrap());
    }

    #[test]
    fn container_round_trip() {
        let mut p = ParamStore::new();
        let mut rng = RngHandle::new(3, 0).rng();
        p.insert("a.w", Tensor::randn(&[4, 5], 1.0, &mut rng), false);
        p.insert("a.b", Tensor::randn(&[4], 1.0, &mut rng), false);
        let c = compress(&p, &CompressionPlan::new(0.5, 8).unwrap()).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(CompressedModel::read_from(&mut buf.as_slice()).unwrap(), c);
        let pruned = c.records["a.w"].mask.as_ref().unwrap();
        for (v, k) in c.params.get("a.w").unwrap().data().iter().zip(pruned) {
            if !k {
                assert_eq!(*v, 0.0);
            }
        }
    }

    fn random_store() -> impl Strategy<Value = ParamStore> {
        proptest::collection::vec((1usize..6, 1usize..6, any::<u64>()), 1..4).prop_map(|layers| {
            let mut p = ParamStore::new();
            for (i, (r, c, seed)) in layers.into_iter().enumerate() {
                let mut rng = RngHandle::new(seed, 0).rng();
                p.insert(
                    format!("l{i}.w"),
                    Tensor::randn(&[r, c], 1.0, &mut rng),
                    false,
                );
                p.insert(format!("l{i}.b"), Tensor::randn(&[r], 1.0, &mut rng), false);
            }
            p
        })
    }

    proptest! {
        #[test]
        fn cost_is_monotone(p in random_store()) {
            for &bits in &QUANT_BITS {
                for w in PRUNE_RATES.windows(2) {
                    let a = estimate_cost(&p, &CompressionPlan::new(w[0], bits).unwrap());
                    let b = estimate_cost(&p, &CompressionPlan::new(w[1], bits).unwrap());
                    prop_assert!(b.mem_bytes <= a.mem_bytes && b.mac <= a.mac);
                }
            }
            for &rate in &PRUNE_RATES {
                for w in QUANT_BITS.windows(2) {
                    let a = estimate_cost(&p, &CompressionPlan::new(rate, w[0]).unwrap());
                    let b = estimate_cost(&p, &CompressionPlan::new(rate, w[1]).unwrap());
                    prop_assert!(a.mem_bytes <= b.mem_bytes && a.mac <= b.mac);
                }
            }
        }

        #[test]
        fn pruned_zeros_survive_quantisation(p in random_store(), ri in 0usize..4, bi in 0usize..4) {
            let plan = CompressionPlan::new(PRUNE_RATES[ri], QUANT_BITS[bi]).unwrap();
            let c = compress(&p, &plan).unwrap();
            let n_w: usize = p.iter().filter(|(n, _)| is_weight(n)).map(|(_, t)| t.tensor.len()).sum();
            let zeros: usize = c.records.values().filter_map(|r| r.mask.as_ref()).flatten().filter(|k| !**k).count();
            prop_assert_eq!(zeros, prune_count(plan.prune_rate, n_w));
            for (name, r) in &c.records {
                if let Some(m) = &r.mask {
                    for (v, k) in c.params.get(name).unwrap().data().iter().zip(m) {
                        prop_assert!(*k || *v == 0.0);
                    }
                }
            }
        }

        #[test]
        fn quantisation_error_is_bounded(v in proptest::collection::vec(-10.0f64..10.0, 1..64), bi in 0usize..3) {
            let bits = [4u8, 8, 16][bi];
            let q = quantize_uniform(&v, bits).unwrap();
            let d = dequantize(&q);
            let bound = q.scale() / 2.0 * (1.0 + 1e-12);
            for (a, b) in v.iter().zip(&d) {
                prop_assert!((a - b).abs() <= bound, "{} vs {} bound {}", a, b, bound);
            }
        }
    }
}
