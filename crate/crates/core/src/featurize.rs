//! Text to hashed bag-of-n-grams.
//!
//! N-grams are the space-free concatenation of their tokens joined by U+001F
//! and hashed with XXH64 under [`HASH_SEED`]; the bucket is the low
//! `buckets_log2` bits of the hash.

use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};

pub const HASH_SEED: u64 = 0x524e_545f_6e67_7261;
pub const HASH_NAME: &str = "xxh64";
const JOINER: char = '\u{1f}';

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sparse, L2-normalized term-frequency vector. Entries are sorted by bucket
/// and never hold a zero weight.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Builds a vector from raw `(bucket, weight)` pairs: duplicate buckets are
    /// summed, zeros dropped. No normalization.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(pairs.len());
        for (b, w) in pairs {
            match entries.last_mut() {
                Some(last) if last.0 == b => last.1 += w,
                _ => entries.push((b, w)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            for e in &mut self.entries {
                e.1 /= n;
            }
        }
    }

    pub fn max_bucket(&self) -> Option<u32> {
        self.entries.last().map(|e| e.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorizerConfig {
    pub n_max: usize,
    pub buckets_log2: u32,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        Self {
            n_max: 2,
            buckets_log2: 18,
        }
    }
}

impl VectorizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::config("vectorizer.n_max", "must be >= 1"));
        }
        if !(10..=30).contains(&self.buckets_log2) {
            return Err(Error::config("vectorizer.buckets_log2", "must lie in [10, 30]"));
        }
        Ok(())
    }

    pub fn buckets(&self) -> usize {
        1usize << self.buckets_log2
    }

    pub fn vectorize(&self, tokens: &[String]) -> SparseVector {
        vectorize(tokens, self.n_max, self.buckets_log2)
    }

    pub fn encode(&self, text: &str) -> SparseVector {
        self.vectorize(&tokenize(text))
    }

    /// Manifest entry recording everything needed to reproduce the mapping.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "n_max": self.n_max,
            "buckets_log2": self.buckets_log2,
            "hash": HASH_NAME,
            "hash_seed": format!("{HASH_SEED:#018x}"),
        })
    }
}

pub fn bucket_of(gram: &str, buckets_log2: u32) -> u32 {
    let mask = (1u64 << buckets_log2) - 1;
    (XxHash64::oneshot(HASH_SEED, gram.as_bytes()) & mask) as u32
}

/// Counts word n-grams for `n = 1..=n_max`, hashes them into `2^buckets_log2`
/// buckets and L2-normalizes the term frequencies.
pub fn vectorize(tokens: &[String], n_max: usize, buckets_log2: u32) -> SparseVector {
    let mut pairs = Vec::with_capacity(tokens.len() * n_max);
    let mut gram = String::new();
    for n in 1..=n_max.max(1) {
        for window in tokens.windows(n) {
            gram.clear();
            for (i, t) in window.iter().enumerate() {
                if i > 0 {
                    gram.push(JOINER);
                }
                gram.push_str(t);
            }
            pairs.push((bucket_of(&gram, buckets_log2), 1.0));
        }
    }
    let mut v = SparseVector::from_pairs(pairs);
    v.normalize();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Great movie!"), toks(&["great", "movie"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A-B"), toks(&["a", "b"]));
        assert_eq!(tokenize("  Ünïcode 42x "), toks(&["ünïcode", "42x"]));
    }

    #[test]
    fn single_token_has_unit_weight() {
        let v = vectorize(&toks(&["a"]), 1, 18);
        assert_eq!(v.len(), 1);
        assert_eq!(v.entries()[0].1, 1.0);
    }

    #[test]
    fn bigram_vector_has_three_equal_weights() {
        let v = vectorize(&toks(&["a", "b"]), 2, 18);
        let buckets: std::collections::BTreeSet<u32> = v.entries().iter().map(|e| e.0).collect();
        assert_eq!(buckets.len(), 3, "fixture must be collision-free");
        for &(_, w) in v.entries() {
            assert!((w - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_tokens_give_empty_vector() {
        assert!(vectorize(&[], 2, 18).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(VectorizerConfig { n_max: 0, buckets_log2: 18 }.validate().is_err());
        assert!(VectorizerConfig { n_max: 2, buckets_log2: 9 }.validate().is_err());
        assert!(VectorizerConfig { n_max: 2, buckets_log2: 31 }.validate().is_err());
        assert!(VectorizerConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn unit_norm_and_deterministic(words in prop::collection::vec("[a-z]{1,6}", 1..30), n in 1usize..4, b in 10u32..20) {
            let v = vectorize(&words, n, b);
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
            prop_assert!(v.entries().iter().all(|e| e.1 != 0.0 && (e.0 as usize) < (1 << b)));
            prop_assert_eq!(&v, &vectorize(&words, n, b));
        }

        #[test]
        fn unigrams_ignore_order(mut words in prop::collection::vec("[a-z]{1,6}", 1..30), seed in any::<u64>()) {
            let v = vectorize(&words, 1, 16);
            use rand::{seq::SliceRandom, SeedableRng};
            words.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let w = vectorize(&words, 1, 16);
            prop_assert_eq!(v.entries().len(), w.entries().len());
            for (a, b) in v.entries().iter().zip(w.entries()) {
                prop_assert_eq!(a.0, b.0);
                prop_assert!((a.1 - b.1).abs() < 1e-15);
            }
        }
    }
}
