//! Variable-rate JSC codec.
//!
//! Each block of 4 features has one dense tier per symbol count s ∈ 1..=4
//! mapping 4 → 2s reals on the encoder and 2s → 4 on the decoder. In a batch
//! every tier is evaluated and laid out side by side in a 160-wide row; the
//! allocation then selects which slice of the row is actually sent.

use crate::channel::{self, ChannelState, ComplexSymbolBlock};
use crate::error::{Error, Result};
use crate::model::bundle::{dec_tier, enc_tier};
use crate::model::{ModelBundle, Net, SemanticVector};
use crate::nn::{Graph, Tensor, Var};
use crate::transmission::{
    RateAllocation, BLOCK_DIM, MAX_SYMBOLS_PER_BLOCK, NUM_BLOCKS, SEMANTIC_DIM,
};

const BLOCK_WIDTH: usize = MAX_SYMBOLS_PER_BLOCK * (MAX_SYMBOLS_PER_BLOCK + 1);
pub const TX_WIDTH: usize = NUM_BLOCKS * BLOCK_WIDTH;

/// Column of the first real of tier `s` of `block` in a transmit row.
pub fn tier_offset(block: usize, s: usize) -> usize {
    block * BLOCK_WIDTH + s * (s - 1)
}

/// All tiers of all blocks for a batch of semantic vectors (n × 32 → n × 160).
pub(crate) fn encode_all_tiers(g: &mut Graph, net: Net, sv: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(NUM_BLOCKS * MAX_SYMBOLS_PER_BLOCK);
    for b in 0..NUM_BLOCKS {
        let x = g.slice_cols(sv, b * BLOCK_DIM, BLOCK_DIM)?;
        for s in 1..=MAX_SYMBOLS_PER_BLOCK {
            parts.push(net.dense(g, x, &enc_tier(b, s))?);
        }
    }
    g.concat_cols(&parts)
}

/// Decodes a received n × 160 row set. Only the tier named by each sample's
/// allocation contributes; zero-symbol blocks and erased samples decode to
/// zeros.
pub(crate) fn decode_tiers(
    g: &mut Graph,
    net: Net,
    rx: Var,
    allocs: &[RateAllocation],
    erased: &[bool],
) -> Result<Var> {
    let n = allocs.len();
    if g.value(rx).shape() != [n, TX_WIDTH] || erased.len() != n {
        return Err(Error::AllocationMismatch(format!(
            "received shape {:?} for {n} allocations",
            g.value(rx).shape()
        )));
    }
    let mut blocks = Vec::with_capacity(NUM_BLOCKS);
    for b in 0..NUM_BLOCKS {
        let mut acc: Option<Var> = None;
        for s in 1..=MAX_SYMBOLS_PER_BLOCK {
            let sel: Vec<bool> = (0..n)
                .map(|i| !erased[i] && allocs[i].s[b] as usize == s)
                .collect();
            if !sel.iter().any(|v| *v) {
                continue;
            }
            let x = g.slice_cols(rx, tier_offset(b, s), 2 * s)?;
            let mut y = net.dense(g, x, &dec_tier(b, s))?;
            if !sel.iter().all(|v| *v) {
                let mask: Vec<f64> = sel
                    .iter()
                    .flat_map(|v| [if *v { 1.0 } else { 0.0 }; BLOCK_DIM])
                    .collect();
                let m = g.constant(Tensor::matrix(n, BLOCK_DIM, mask)?);
                y = g.mul(y, m)?;
            }
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        blocks.push(match acc {
            Some(a) => a,
            None => g.constant(Tensor::zeros(&[n, BLOCK_DIM])),
        });
    }
    g.concat_cols(&blocks)
}

/// Symbols actually sent by one sample: one block per semantic block,
/// empty where the allocation is zero.
pub(crate) fn gather_symbols(
    row: &[f64],
    alloc: &RateAllocation,
) -> Result<Vec<ComplexSymbolBlock>> {
    (0..NUM_BLOCKS)
        .map(|b| {
            let s = alloc.s[b] as usize;
            if s == 0 {
                Ok(ComplexSymbolBlock::default())
            } else {
                let off = tier_offset(b, s);
                ComplexSymbolBlock::from_reals(&row[off..off + 2 * s])
            }
        })
        .collect()
}

/// Writes received symbols back into a 160-wide row at their tier slots.
pub(crate) fn scatter_symbols(
    blocks: &[ComplexSymbolBlock],
    alloc: &RateAllocation,
    row: &mut [f64],
) -> Result<()> {
    if blocks.len() != NUM_BLOCKS {
        return Err(Error::AllocationMismatch(format!(
            "{} blocks, expected {NUM_BLOCKS}",
            blocks.len()
        )));
    }
    for (b, blk) in blocks.iter().enumerate() {
        let s = alloc.s[b] as usize;
        if blk.len() != s {
            return Err(Error::AllocationMismatch(format!(
                "block {b} carries {} symbols but allocation says {s}",
                blk.len()
            )));
        }
        if s > 0 {
            let off = tier_offset(b, s);
            row[off..off + 2 * s].copy_from_slice(&blk.to_reals());
        }
    }
    Ok(())
}

/// Per-sample channel pass over the selected symbols. Returns the additive
/// perturbation (receiver estimate minus transmitted value, zero outside
/// the sent slots) and the erasure flags. `None` links are noiseless.
pub(crate) fn channel_perturbation(
    tx: &Tensor,
    allocs: &[RateAllocation],
    links: &[Option<ChannelState>],
) -> Result<(Tensor, Vec<bool>)> {
    let n = allocs.len();
    let mut noise = vec![0.0; n * TX_WIDTH];
    let mut erased = vec![false; n];
    for i in 0..n {
        let Some(state) = &links[i] else { continue };
        let row = tx.row(i);
        let sent = gather_symbols(row, &allocs[i])?;
        let out = channel::transmit(&sent, state, false)?;
        match out.estimate {
            None => erased[i] = true,
            Some(est) => {
                let mut rx = row.to_vec();
                scatter_symbols(&est, &allocs[i], &mut rx)?;
                for (o, (r, t)) in noise[i * TX_WIDTH..(i + 1) * TX_WIDTH]
                    .iter_mut()
                    .zip(rx.iter().zip(row))
                {
                    *o = r - t;
                }
            }
        }
    }
    Ok((Tensor::matrix(n, TX_WIDTH, noise)?, erased))
}

/// Encodes one semantic vector under an allocation into per-block symbols.
pub fn jsc_encode(
    sv: &SemanticVector,
    alloc: &RateAllocation,
    bundle: &ModelBundle,
) -> Result<Vec<ComplexSymbolBlock>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, SEMANTIC_DIM, sv.values.clone())?);
    let tx = encode_all_tiers(&mut g, Net::new(&bundle.device, &bundle.dims), x)?;
    gather_symbols(g.value(tx).data(), alloc)
}

/// Decodes per-block symbols. Block sizes must match the allocation.
pub fn jsc_decode(
    blocks: &[ComplexSymbolBlock],
    alloc: &RateAllocation,
    bundle: &ModelBundle,
) -> Result<SemanticVector> {
    let mut row = vec![0.0; TX_WIDTH];
    scatter_symbols(blocks, alloc, &mut row)?;
    let mut g = Graph::new();
    let rx = g.constant(Tensor::matrix(1, TX_WIDTH, row)?);
    let sv = decode_tiers(
        &mut g,
        Net::new(&bundle.server, &bundle.dims),
        rx,
        std::slice::from_ref(alloc),
        &[false],
    )?;
    SemanticVector::new(g.value(sv).data().to_vec(), [false; 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::total_symbols;
    use crate::model::ModelDims;
    use crate::nn::RngHandle;
    use crate::transmission::{allocate_uniform, RateAllocation};
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn identity_bundle() -> ModelBundle {
        let mut b = ModelBundle::init(ModelDims::default(), &RngHandle::new(4, 0));
        b.set_identity_tiers().unwrap();
        b
    }

    fn sv(seed: u64) -> SemanticVector {
        let v = (0..32)
            .map(|i| ((i as u64 * 7 + seed) as f64 * 0.31).sin())
            .collect();
        SemanticVector::new(v, [true; 3]).unwrap()
    }

    #[test]
    fn tier_layout_is_dense() {
        assert_eq!(tier_offset(0, 1), 0);
        assert_eq!(tier_offset(0, 2), 2);
        assert_eq!(tier_offset(0, 3), 6);
        assert_eq!(tier_offset(0, 4), 12);
        assert_eq!(tier_offset(1, 1), 20);
        assert_eq!(TX_WIDTH, 160);
    }

    #[test]
    fn zero_budget_sends_nothing() {
        let b = identity_bundle();
        let out = jsc_encode(&sv(1), &RateAllocation::zero(), &b).unwrap();
        assert_eq!(total_symbols(&out), 0);
        let back = jsc_decode(&out, &RateAllocation::zero(), &b).unwrap();
        assert!(back.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_tiers_pair_raw_features() {
        let b = identity_bundle();
        let x = sv(2);
        let out = jsc_encode(&x, &RateAllocation::full(), &b).unwrap();
        for (blk, feats) in out.iter().zip(x.values.chunks(4)) {
            assert_eq!(blk.symbols[0], Complex64::new(feats[0], feats[1]));
            assert_eq!(blk.symbols[1], Complex64::new(feats[2], feats[3]));
            assert_eq!(blk.symbols[2], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn inverse_tiers_recover_input() {
        let b = identity_bundle();
        let x = sv(3);
        for alloc in [
            RateAllocation::full(),
            RateAllocation::new([2, 3, 4, 2, 3, 4, 2, 2]).unwrap(),
        ] {
            let back = jsc_decode(&jsc_encode(&x, &alloc, &b).unwrap(), &alloc, &b).unwrap();
            for (a, c) in back.values.iter().zip(&x.values) {
                assert!((a - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mismatched_allocation_is_an_error() {
        let b = identity_bundle();
        let a = allocate_uniform(16);
        let blocks = jsc_encode(&sv(4), &a, &b).unwrap();
        let other = RateAllocation::new([4, 0, 2, 2, 2, 2, 2, 2]).unwrap();
        assert!(matches!(
            jsc_decode(&blocks, &other, &b),
            Err(Error::AllocationMismatch(_))
        ));
        assert!(jsc_decode(&blocks[..7], &a, &b).is_err());
    }

    #[test]
    fn noiseless_links_add_nothing() {
        let b = identity_bundle();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 32, sv(5).values).unwrap());
        let tx = encode_all_tiers(&mut g, Net::new(&b.device, &b.dims), x).unwrap();
        let (noise, erased) =
            channel_perturbation(g.value(tx), &[RateAllocation::full()], &[None]).unwrap();
        assert_eq!(noise.max_abs(), 0.0);
        assert_eq!(erased, vec![false]);
    }

    proptest! {
        #[test]
        fn budget_conservation(budget in 0usize..=32, seed in 0u64..1000) {
            let b = identity_bundle();
            let a = allocate_uniform(budget);
            let out = jsc_encode(&sv(seed), &a, &b).unwrap();
            prop_assert_eq!(total_symbols(&out), budget);
        }
    }
}
