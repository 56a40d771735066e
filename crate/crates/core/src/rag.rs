//! Plug-in vector knowledge bases with exact cosine retrieval.
//!
//! Entries are (key, value) pairs of semantic vectors. Retrieval is a full
//! scan, so results are exact. Augmentation blends a semantic vector with a
//! softmax-weighted mixture of retrieved values:
//!
//! ```text
//! sv' = (1 − gate)·sv + gate·Σ_j softmax(sim)_j · value_j
//! ```
//!
//! Persistence (little-endian):
//!
//! ```text
//! "MTSCKB1"  u32 count
//! repeat count:
//!     f64 key[32]  f64 value[32]  u32 tag_len  tag (UTF-8)  u64 insert_index
//! ```

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_f64, read_str, read_u32, write_str, write_u32};
use crate::nn::Tensor;
use crate::transmission::SEMANTIC_DIM;

pub const KB_MAGIC: &[u8; 7] = b"MTSCKB1";
pub const DEFAULT_GATE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KbEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub tag: String,
    pub insert_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBase {
    scope: Scope,
    entries: Vec<KbEntry>,
    norms: Vec<f64>,
    next_index: u64,
}

/// One retrieved entry with its cosine similarity to the query.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit<'a> {
    pub entry: &'a KbEntry,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval<'a> {
    pub hits: Vec<Hit<'a>>,
    /// Set when the knowledge base had no entries to search.
    pub empty_kb: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_vec(what: &str, v: &[f64]) -> Result<()> {
    if v.len() != SEMANTIC_DIM {
        return Err(Error::shape("knowledge base", &[v.len()], &[SEMANTIC_DIM]));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Descending similarity, then ascending insert index.
fn rank(a: &(f64, u64), b: &(f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl KnowledgeBase {
    pub fn new(scope: Scope) -> Self {
        Self {
            scope,
            entries: Vec::new(),
            norms: Vec::new(),
            next_index: 0,
        }
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    /// Appends an entry and returns its insert index. Zero keys are rejected
    /// and leave the knowledge base unchanged.
    pub fn insert(
        &mut self,
        key: Vec<f64>,
        value: Vec<f64>,
        tag: impl Into<String>,
    ) -> Result<u64> {
        check_vec("kb key", &key)?;
        check_vec("kb value", &value)?;
        let n = norm(&key);
        if n == 0.0 {
            return Err(Error::InvalidInput(
                "knowledge base keys must be non-zero".into(),
            ));
        }
        let idx = self.next_index;
        self.entries.push(KbEntry {
            key,
            value,
            tag: tag.into(),
            insert_index: idx,
        });
        self.norms.push(n);
        self.next_index += 1;
        Ok(idx)
    }

    /// Exact top-k by cosine similarity.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Retrieval<'_>> {
        check_vec("kb query", query)?;
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::InvalidInput("query must be non-zero".into()));
        }
        if self.entries.is_empty() {
            return Ok(Retrieval {
                hits: Vec::new(),
                empty_kb: true,
            });
        }
        let mut scored: Vec<(f64, u64, usize)> = self
            .entries
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (e, n))| {
                let dot: f64 = e.key.iter().zip(query).map(|(a, b)| a * b).sum();
                (dot / (n * qn), e.insert_index, i)
            })
            .collect();
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| rank(&(a.0, a.1), &(b.0, b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(Retrieval {
            hits: scored
                .into_iter()
                .map(|(s, _, i)| Hit {
                    entry: &self.entries[i],
                    similarity: s,
                })
                .collect(),
            empty_kb: false,
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(KB_MAGIC)?;
        write_u32(w, self.entries.len() as u32)?;
        for e in &self.entries {
            for v in e.key.iter().chain(&e.value) {
                w.write_all(&v.to_le_bytes())?;
            }
            write_str(w, &e.tag)?;
            w.write_all(&e.insert_index.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, scope: Scope) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != KB_MAGIC {
            return Err(Error::format("MTSCKB1", "bad magic"));
        }
        let count = read_u32(r)? as usize;
        let mut kb = Self::new(scope);
        for _ in 0..count {
            let mut vals = Vec::with_capacity(2 * SEMANTIC_DIM);
            for _ in 0..2 * SEMANTIC_DIM {
                vals.push(read_f64(r)?);
            }
            let value = vals.split_off(SEMANTIC_DIM);
            let tag = read_str(r, "MTSCKB1")?;
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let insert_index = u64::from_le_bytes(b);
            if insert_index < kb.next_index {
                return Err(Error::format("MTSCKB1", "insert indices must increase"));
            }
            check_vec("kb key", &vals)?;
            let n = norm(&vals);
            if n == 0.0 {
                return Err(Error::format("MTSCKB1", "zero key"));
            }
            kb.entries.push(KbEntry {
                key: vals,
                value,
                tag,
                insert_index,
            });
            kb.norms.push(n);
            kb.next_index = insert_index + 1;
        }
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, scope: Scope) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice(), scope)
    }
}

/// Blends `sv` with the softmax-weighted retrieved values. No hits or a zero
/// gate return `sv` unchanged.
pub fn augment_semantics(sv: &[f64], hits: &[Hit], gate: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gate) {
        return Err(Error::InvalidInput(format!("gate {gate} outside [0, 1]")));
    }
    if hits.is_empty() || gate == 0.0 {
        return Ok(sv.to_vec());
    }
    let max = hits
        .iter()
        .map(|h| h.similarity)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = hits.iter().map(|h| (h.similarity - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mix = vec![0.0; sv.len()];
    for (h, wj) in hits.iter().zip(&w) {
        if h.entry.value.len() != sv.len() {
            return Err(Error::shape(
                "augment_semantics",
                &[sv.len()],
                &[h.entry.value.len()],
            ));
        }
        for (m, v) in mix.iter_mut().zip(&h.entry.value) {
            *m += wj / total * v;
        }
    }
    Ok(sv
        .iter()
        .zip(&mix)
        .map(|(s, m)| (1.0 - gate) * s + gate * m)
        .collect())
}

/// Retrieval plus augmentation applied row by row to a batch.
#[derive(Clone, Copy, Debug)]
pub struct Augmenter<'a> {
    pub kb: &'a KnowledgeBase,
    pub k: usize,
    pub gate: f64,
}

impl Augmenter<'_> {
    /// `None` when nothing would change (empty knowledge base). Zero rows
    /// have no direction to search with and pass through.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Option<Tensor>> {
        if self.kb.is_empty() {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let row = x.row(i);
            if norm(row) == 0.0 {
                out.extend_from_slice(row);
                continue;
            }
            let r = self.kb.retrieve(row, self.k)?;
            out.extend(augment_semantics(row, &r.hits, self.gate)?);
        }
        Ok(Some(Tensor::new(x.shape().to_vec(), out)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; SEMANTIC_DIM];
        v[i] = 1.0;
        v
    }

    fn scan(kb: &KnowledgeBase, q: &[f64], k: usize) -> Vec<(u64, f64)> {
        let qn = norm(q);
        let mut best: Vec<(u64, f64)> = Vec::new();
        for e in kb.entries() {
            let s = e.key.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (norm(&e.key) * qn);
            let pos = best
                .iter()
                .position(|(i, b)| s > *b || (s == *b && e.insert_index < *i))
                .unwrap_or(best.len());
            best.insert(pos, (e.insert_index, s));
            best.truncate(k);
        }
        best
    }

    #[test]
    fn insert_and_reject_zero_key() {
        let mut kb = KnowledgeBase::new(Scope::Local);
        assert_eq!(kb.insert(unit(0), unit(1), "a").unwrap(), 0);
        assert_eq!(kb.insert(unit(0), unit(2), "dup").unwrap(), 1);
        assert_eq!(kb.len(), 2);
        let before = kb.clone();
        assert!(kb.insert(vec![0.0; 32], unit(1), "zero").is_err());
        assert_eq!(kb, before);
    }

    #[test]
    fn retrieval_examples() {
        let mut kb = KnowledgeBase::new(Scope::Global);
        kb.insert(unit(3), unit(4), "x").unwrap();
        let r = kb.retrieve(&unit(3), 1).unwrap();
        assert_eq!(r.hits[0].entry.tag, "x");
        assert_eq!(r.hits[0].similarity, 1.0);
        assert_eq!(kb.retrieve(&unit(5), 1).unwrap().hits[0].similarity, 0.0);
        assert!(kb.retrieve(&vec![0.0; 32], 1).is_err());
        let empty = KnowledgeBase::new(Scope::Local);
        let r = empty.retrieve(&unit(0), 3).unwrap();
        assert!(r.empty_kb && r.hits.is_empty());
    }

    #[test]
    fn ties_prefer_earlier_inserts() {
        let mut kb = KnowledgeBase::new(Scope::Local);
        for t in ["a", "b", "c"] {
            kb.insert(unit(0), unit(1), t).unwrap();
        }
        let r = kb.retrieve(&unit(0), 2).unwrap();
        assert_eq!(
            r.hits
                .iter()
                .map(|h| h.entry.tag.as_str())
                .collect::<Vec<_>>(),
            ["a", "b"]
        );
    }

    #[test]
    fn augmentation_examples() {
        let mut kb = KnowledgeBase::new(Scope::Local);
        kb.insert(unit(0), unit(5), "a").unwrap();
        kb.insert(unit(1), unit(6), "b").unwrap();
        let sv: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let one = kb.retrieve(&unit(0), 1).unwrap();
        assert_eq!(augment_semantics(&sv, &one.hits, 0.0).unwrap(), sv);
        assert_eq!(augment_semantics(&sv, &one.hits, 1.0).unwrap(), unit(5));
        assert_eq!(augment_semantics(&sv, &[], 0.7).unwrap(), sv);
        let mut q = unit(0);
        q[1] = 1.0;
        let two = kb.retrieve(&q, 2).unwrap();
        let mixed = augment_semantics(&vec![0.0; 32], &two.hits, 1.0).unwrap();
        assert_eq!((mixed[5], mixed[6]), (0.5, 0.5));
        assert!(augment_semantics(&sv, &one.hits, 1.5).is_err());
    }

    #[test]
    fn persistence_round_trip_and_layout() {
        let mut kb = KnowledgeBase::new(Scope::Local);
        kb.insert(unit(2), unit(3), "tag").unwrap();
        kb.insert(unit(7), unit(1), "").unwrap();
        let mut buf = Vec::new();
        kb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"MTSCKB1");
        assert_eq!(buf.len(), 7 + 4 + 2 * (64 * 8 + 4 + 8) + 3);
        let back = KnowledgeBase::read_from(&mut buf.as_slice(), Scope::Local).unwrap();
        assert_eq!(back, kb);
        assert!(KnowledgeBase::read_from(&mut &b"MTSCKB2\0\0\0\0"[..], Scope::Local).is_err());
    }

    #[test]
    fn empty_kb_augmenter_is_a_no_op() {
        let kb = KnowledgeBase::new(Scope::Global);
        let aug = Augmenter {
            kb: &kb,
            k: 3,
            gate: 0.5,
        };
        assert_eq!(aug.apply_rows(&Tensor::full(&[2, 32], 0.1)).unwrap(), None);
    }

    fn random_vec<R: Rng>(rng: &mut R, quantized: bool) -> Vec<f64> {
        (0..SEMANTIC_DIM)
            .map(|_| {
                if quantized {
                    rng.random_range(-2i32..=2) as f64
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn retrieval_matches_scan(seed in any::<u64>(), n in 1usize..60, k in 1usize..8, quantized in any::<bool>()) {
            let mut rng = crate::nn::RngHandle::new(seed, 0).rng();
            let mut kb = KnowledgeBase::new(Scope::Local);
            while kb.len() < n {
                let key = random_vec(&mut rng, quantized);
                if norm(&key) > 0.0 {
                    kb.insert(key, random_vec(&mut rng, false), "").unwrap();
                }
            }
            let mut q = random_vec(&mut rng, quantized);
            q[0] += 3.0;
            let got: Vec<(u64, f64)> = kb.retrieve(&q, k).unwrap().hits.iter().map(|h| (h.entry.insert_index, h.similarity)).collect();
            prop_assert_eq!(got, scan(&kb, &q, k));
        }

        #[test]
        fn augmentation_stays_in_convex_hull(seed in any::<u64>(), gate in 0.0f64..=1.0, k in 1usize..5) {
            let mut rng = crate::nn::RngHandle::new(seed, 1).rng();
            let mut kb = KnowledgeBase::new(Scope::Local);
            for _ in 0..10 {
                let mut key = random_vec(&mut rng, false);
                key[1] += 2.0;
                kb.insert(key, random_vec(&mut rng, false), "").unwrap();
            }
            let sv = random_vec(&mut rng, false);
            let mut q = sv.clone();
            q[1] += 2.0;
            let hits = kb.retrieve(&q, k).unwrap().hits;
            let out = augment_semantics(&sv, &hits, gate).unwrap();
            for d in 0..SEMANTIC_DIM {
                let vals = hits.iter().map(|h| h.entry.value[d]).chain([sv[d]]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                prop_assert!(out[d] >= lo - 1e-12 && out[d] <= hi + 1e-12);
            }
        }
    }
}
