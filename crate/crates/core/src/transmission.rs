//! Importance-aware variable-rate transmission.
//!
//! The semantic vector is split into [`NUM_BLOCKS`] blocks of [`BLOCK_DIM`]
//! features. Each block gets between 0 and [`MAX_SYMBOLS_PER_BLOCK`] complex
//! symbols. The split of a total symbol budget interpolates between uniform
//! protection (poor channel) and importance-proportional protection (good
//! channel):
//!
//! ```text
//! λ        = clamp((snr_db − snr_lo) / (snr_hi − snr_lo), 0, 1)
//! target_i = budget · (λ·score_i + (1 − λ)/B)
//! ```
//!
//! Targets are integerised by largest remainder with a per-block cap. Units
//! are handed out one pass at a time in (remainder desc, index asc) order.

use crate::error::{Error, Result};

pub const NUM_BLOCKS: usize = 8;
pub const BLOCK_DIM: usize = 4;
pub const MAX_SYMBOLS_PER_BLOCK: usize = 4;
pub const MAX_BUDGET: usize = NUM_BLOCKS * MAX_SYMBOLS_PER_BLOCK;
pub const SEMANTIC_DIM: usize = NUM_BLOCKS * BLOCK_DIM;

pub const SNR_LO_DB: f64 = -6.0;
pub const SNR_HI_DB: f64 = 12.0;

/// Per-block importance, non-negative and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores(pub [f64; NUM_BLOCKS]);

impl ImportanceScores {
    pub fn uniform() -> Self {
        Self([1.0 / NUM_BLOCKS as f64; NUM_BLOCKS])
    }

    /// Normalises arbitrary non-negative weights; all-zero input gives uniform.
    pub fn from_weights(w: &[f64; NUM_BLOCKS]) -> Result<Self> {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "importance weights must be finite and >= 0: {w:?}"
            )));
        }
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            return Ok(Self::uniform());
        }
        let mut s = [0.0; NUM_BLOCKS];
        for (o, v) in s.iter_mut().zip(w) {
            *o = v / total;
        }
        Ok(Self(s))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `score_i = ‖block_i‖₂ / Σ_j ‖block_j‖₂`.
pub fn score_importance(sv: &[f64]) -> Result<ImportanceScores> {
    if sv.len() != SEMANTIC_DIM {
        return Err(Error::shape(
            "score_importance",
            &[sv.len()],
            &[SEMANTIC_DIM],
        ));
    }
    if sv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("semantic vector".into()));
    }
    let mut norms = [0.0; NUM_BLOCKS];
    for (n, block) in norms.iter_mut().zip(sv.chunks_exact(BLOCK_DIM)) {
        *n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    ImportanceScores::from_weights(&norms)
}

/// Symbols per block plus the budget it was computed for.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RateAllocation {
    pub s: [u8; NUM_BLOCKS],
    pub total_budget: usize,
    /// Set when the requested budget exceeded [`MAX_BUDGET`] and was clamped.
    pub clamped_from: Option<usize>,
}

impl RateAllocation {
    pub fn new(s: [u8; NUM_BLOCKS]) -> Result<Self> {
        if let Some(v) = s.iter().find(|v| **v as usize > MAX_SYMBOLS_PER_BLOCK) {
            return Err(Error::AllocationMismatch(format!(
                "block allocation {v} exceeds per-block max {MAX_SYMBOLS_PER_BLOCK}"
            )));
        }
        Ok(Self {
            s,
            total_budget: s.iter().map(|v| *v as usize).sum(),
            clamped_from: None,
        })
    }

    pub fn full() -> Self {
        Self::new([MAX_SYMBOLS_PER_BLOCK as u8; NUM_BLOCKS]).expect("max is valid")
    }

    pub fn zero() -> Self {
        Self::new([0; NUM_BLOCKS]).expect("zero is valid")
    }

    pub fn symbols(&self) -> usize {
        self.s.iter().map(|v| *v as usize).sum()
    }

    /// Side information as `(block_id: u8, s_i: u8)` pairs.
    pub fn to_side_info(&self) -> Vec<u8> {
        self.s
            .iter()
            .enumerate()
            .flat_map(|(b, s)| [b as u8, *s])
            .collect()
    }

    pub fn from_side_info(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 2 * NUM_BLOCKS {
            return Err(Error::AllocationMismatch(format!(
                "side info has {} bytes, expected {}",
                bytes.len(),
                2 * NUM_BLOCKS
            )));
        }
        let mut s = [0u8; NUM_BLOCKS];
        let mut seen = [false; NUM_BLOCKS];
        for pair in bytes.chunks_exact(2) {
            let b = pair[0] as usize;
            if b >= NUM_BLOCKS || seen[b] {
                return Err(Error::AllocationMismatch(format!(
                    "bad or repeated block id {b}"
                )));
            }
            seen[b] = true;
            s[b] = pair[1];
        }
        Self::new(s)
    }
}

/// λ in [0, 1]: 0 at or below `SNR_LO_DB`, 1 at or above `SNR_HI_DB`.
pub fn channel_weight(snr_db: f64) -> f64 {
    ((snr_db - SNR_LO_DB) / (SNR_HI_DB - SNR_LO_DB)).clamp(0.0, 1.0)
}

/// Real-valued per-block targets before integerisation.
pub fn allocation_targets(
    scores: &ImportanceScores,
    lambda: f64,
    budget: usize,
) -> [f64; NUM_BLOCKS] {
    let mut t = [0.0; NUM_BLOCKS];
    let uniform = (1.0 - lambda) / NUM_BLOCKS as f64;
    for (o, s) in t.iter_mut().zip(&scores.0) {
        *o = budget as f64 * (lambda * s + uniform);
    }
    t
}

/// Largest-remainder integerisation with a per-block cap.
pub fn integerize(targets: &[f64; NUM_BLOCKS], budget: usize) -> [u8; NUM_BLOCKS] {
    let budget = budget.min(MAX_BUDGET);
    let cap = MAX_SYMBOLS_PER_BLOCK;
    let mut s = [0usize; NUM_BLOCKS];
    let mut rem = [0.0; NUM_BLOCKS];
    for i in 0..NUM_BLOCKS {
        let t = targets[i].max(0.0);
        let f = t.floor();
        s[i] = (f as usize).min(cap);
        rem[i] = t - f;
    }
    let mut order: Vec<usize> = (0..NUM_BLOCKS).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));

    let mut assigned: usize = s.iter().sum();
    // Rounding in the targets can push the floor sum past the budget; take
    // units back from the smallest remainders first.
    while assigned > budget {
        if let Some(&i) = order.iter().rev().find(|&&i| s[i] > 0) {
            s[i] -= 1;
            assigned -= 1;
        }
    }
    while assigned < budget {
        for &i in &order {
            if assigned == budget {
                break;
            }
            if s[i] < cap {
                s[i] += 1;
                assigned += 1;
            }
        }
    }
    s.map(|v| v as u8)
}

/// Allocates `total_budget` symbols from importance scores and channel SNR.
/// Budgets above [`MAX_BUDGET`] are clamped and the clamp is recorded.
pub fn allocate_rates(
    scores: &ImportanceScores,
    snr_db: f64,
    total_budget: usize,
) -> RateAllocation {
    allocate_with_lambda(scores, channel_weight(snr_db), total_budget)
}

pub fn allocate_with_lambda(
    scores: &ImportanceScores,
    lambda: f64,
    total_budget: usize,
) -> RateAllocation {
    let clamped_from = (total_budget > MAX_BUDGET).then_some(total_budget);
    let budget = total_budget.min(MAX_BUDGET);
    let targets = allocation_targets(scores, lambda, budget);
    RateAllocation {
        s: integerize(&targets, budget),
        total_budget: budget,
        clamped_from,
    }
}

/// Equal-share allocation used as the non-adaptive reference.
pub fn allocate_uniform(total_budget: usize) -> RateAllocation {
    allocate_with_lambda(&ImportanceScores::uniform(), 0.0, total_budget)
}

/// `Σ_i score_i · ‖block_i − block̂_i‖²`.
pub fn importance_weighted_distortion(
    sv: &[f64],
    sv_hat: &[f64],
    scores: &ImportanceScores,
) -> Result<f64> {
    if sv.len() != SEMANTIC_DIM || sv_hat.len() != SEMANTIC_DIM {
        return Err(Error::shape(
            "importance_weighted_distortion",
            &[sv.len()],
            &[sv_hat.len()],
        ));
    }
    Ok(sv
        .chunks_exact(BLOCK_DIM)
        .zip(sv_hat.chunks_exact(BLOCK_DIM))
        .zip(&scores.0)
        .map(|((a, b), w)| w * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv_with_norms(norms: [f64; NUM_BLOCKS]) -> Vec<f64> {
        norms.iter().flat_map(|n| [*n, 0.0, 0.0, 0.0]).collect()
    }

    #[test]
    fn score_examples() {
        let s = score_importance(&sv_with_norms([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.0, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let s = score_importance(&sv_with_norms([0.5; 8])).unwrap();
        assert_eq!(s.0, [0.125; 8]);
        let s = score_importance(&sv_with_norms([2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(s.0, [0.5, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            score_importance(&[0.0; 32]).unwrap(),
            ImportanceScores::uniform()
        );
    }

    #[test]
    fn allocation_examples() {
        let u = ImportanceScores::uniform();
        for lambda in [0.0, 0.3, 1.0] {
            assert_eq!(allocate_with_lambda(&u, lambda, 16).s, [2; 8]);
        }
        let one_hot = ImportanceScores([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            allocate_with_lambda(&one_hot, 1.0, 8).s,
            [4, 1, 1, 1, 1, 0, 0, 0]
        );
        assert_eq!(allocate_with_lambda(&one_hot, 1.0, 0).s, [0; 8]);
    }

    #[test]
    fn over_budget_is_clamped_and_recorded() {
        let a = allocate_uniform(40);
        assert_eq!(a.s, [4; 8]);
        assert_eq!(a.total_budget, 32);
        assert_eq!(a.clamped_from, Some(40));
    }

    #[test]
    fn channel_weight_endpoints() {
        assert_eq!(channel_weight(-10.0), 0.0);
        assert_eq!(channel_weight(-6.0), 0.0);
        assert_eq!(channel_weight(3.0), 0.5);
        assert_eq!(channel_weight(12.0), 1.0);
        assert_eq!(channel_weight(30.0), 1.0);
    }

    #[test]
    fn side_info_round_trip_and_errors() {
        let a = RateAllocation::new([4, 0, 1, 2, 3, 4, 0, 1]).unwrap();
        assert_eq!(
            RateAllocation::from_side_info(&a.to_side_info()).unwrap(),
            a
        );
        assert!(RateAllocation::from_side_info(&[0, 1]).is_err());
        let mut bad = a.to_side_info();
        bad[3] = 5;
        assert!(RateAllocation::from_side_info(&bad).is_err());
        assert!(RateAllocation::new([5, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn distortion_examples() {
        let sv: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        let s = ImportanceScores([0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(importance_weighted_distortion(&sv, &sv, &s).unwrap(), 0.0);
        let mut hat = sv.clone();
        hat[9] += 3.0; // block 2 has zero score
        assert_eq!(importance_weighted_distortion(&sv, &hat, &s).unwrap(), 0.0);
        let mut hat = sv.clone();
        hat[0] += 1.0;
        assert_eq!(importance_weighted_distortion(&sv, &hat, &s).unwrap(), 0.5);
    }

    fn scores_strategy() -> impl Strategy<Value = ImportanceScores> {
        proptest::array::uniform8(0.0f64..10.0)
            .prop_map(|w| ImportanceScores::from_weights(&w).unwrap())
    }

    proptest! {
        #[test]
        fn budget_is_exact(scores in scores_strategy(), budget in 0usize..48, snr in -12.0f64..20.0) {
            let a = allocate_rates(&scores, snr, budget);
            prop_assert_eq!(a.symbols(), budget.min(MAX_BUDGET));
            prop_assert!(a.s.iter().all(|v| *v as usize <= MAX_SYMBOLS_PER_BLOCK));
        }

        #[test]
        fn importance_monotone_at_full_lambda(scores in scores_strategy(), budget in 0usize..=32) {
            let a = allocate_with_lambda(&scores, 1.0, budget);
            for i in 0..NUM_BLOCKS {
                for j in 0..NUM_BLOCKS {
                    if scores.0[i] >= scores.0[j] {
                        prop_assert!(a.s[i] >= a.s[j].min(MAX_SYMBOLS_PER_BLOCK as u8),
                            "scores {:?} alloc {:?}", scores.0, a.s);
                    }
                }
            }
        }

        #[test]
        fn scale_invariance(norms in proptest::array::uniform8(0.01f64..5.0), exp in -8i32..8, budget in 0usize..=32, snr in -6.0f64..12.0) {
            let c = 2f64.powi(exp);
            let base = score_importance(&sv_with_norms(norms)).unwrap();
            let scaled = score_importance(&sv_with_norms(norms.map(|n| n * c))).unwrap();
            prop_assert_eq!(&base, &scaled);
            prop_assert_eq!(allocate_rates(&base, snr, budget), allocate_rates(&scaled, snr, budget));
        }
    }
}
