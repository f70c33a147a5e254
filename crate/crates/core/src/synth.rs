//! Synthetic topic corpora for fixtures and experiments.
//!
//! Each class owns a Zipf-distributed topical vocabulary. Documents mix
//! topical tokens with common words shared by all classes and a few
//! near-unique rare tokens, so a model can both generalize (topical words)
//! and memorize individual documents (rare tokens and bigrams).

use rand::Rng as _;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, Document};
use crate::error::{Error, Result};
use crate::seed;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "va", "ze", "bo", "du", "fe", "gi", "ha", "jo", "ku", "le", "mo",
    "ni", "po", "ri", "su", "te",
];

const RARE_POOL: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_docs: usize,
    pub num_classes: usize,
    /// Topical words per class.
    pub class_vocab: usize,
    /// Common words shared by every class.
    pub shared_vocab: usize,
    pub zipf_exponent: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Each document draws its share of topical tokens uniformly from
    /// `[clarity_min, clarity_max]`; the rest are common words.
    pub clarity_min: f64,
    pub clarity_max: f64,
    /// Probability that a topical token comes from another class.
    pub confusion: f64,
    /// Near-unique tokens per document.
    pub rare_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_docs: 2000,
            num_classes: 4,
            class_vocab: 400,
            shared_vocab: 300,
            zipf_exponent: 1.0,
            min_words: 12,
            max_words: 30,
            clarity_min: 0.1,
            clarity_max: 0.5,
            confusion: 0.25,
            rare_words: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("synth.{field}"), msg));
        if self.num_classes < 2 {
            return bad("num_classes", "must be >= 2");
        }
        if self.num_docs < self.num_classes {
            return bad("num_docs", "must be >= num_classes");
        }
        if self.class_vocab < 1 || self.shared_vocab < 1 {
            return bad("class_vocab", "vocabularies must be nonempty");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent", "must be finite and >= 0");
        }
        if self.min_words < 1 || self.min_words > self.max_words {
            return bad("min_words", "need 1 <= min_words <= max_words");
        }
        if !(0.0 <= self.clarity_min && self.clarity_min <= self.clarity_max && self.clarity_max <= 1.0) {
            return bad("clarity_min", "need 0 <= clarity_min <= clarity_max <= 1");
        }
        if !(0.0..=1.0).contains(&self.confusion) {
            return bad("confusion", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Pronounceable pseudo-word for a global index (bijective base-24, at least
/// two syllables), so distinct indices give distinct words.
pub fn word(index: u64) -> String {
    let b = SYLLABLES.len() as u64;
    let mut n = index + 1 + b;
    let mut parts = Vec::new();
    while n > 0 {
        n -= 1;
        parts.push(SYLLABLES[(n % b) as usize]);
        n /= b;
    }
    parts.reverse();
    parts.concat()
}

/// Generates `num_docs` labeled documents, classes assigned round-robin.
/// Generation is per-document seeded, so any prefix is stable under changes
/// to `num_docs`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let k = cfg.num_classes as u64;
    let class_base = |c: u64| cfg.shared_vocab as u64 + c * cfg.class_vocab as u64;
    let rare_base = class_base(k);
    let topical = Zipf::new(cfg.class_vocab as f64, cfg.zipf_exponent).map_err(|e| Error::config("synth.zipf_exponent", e.to_string()))?;
    let common = Zipf::new(cfg.shared_vocab as f64, cfg.zipf_exponent).map_err(|e| Error::config("synth.zipf_exponent", e.to_string()))?;
    Ok((0..cfg.num_docs as u64)
        .map(|i| {
            let mut rng = seed::item_rng(cfg.seed, "synth/doc", i);
            let label = i % k;
            let len = rng.random_range(cfg.min_words..=cfg.max_words);
            let clarity = rng.random_range(cfg.clarity_min..=cfg.clarity_max);
            let mut words: Vec<String> = (0..len)
                .map(|_| {
                    if rng.random_bool(clarity) {
                        let class = if k > 1 && rng.random_bool(cfg.confusion) {
                            let other = rng.random_range(0..k - 1);
                            if other >= label {
                                other + 1
                            } else {
                                other
                            }
                        } else {
                            label
                        };
                        word(class_base(class) + topical.sample(&mut rng) as u64 - 1)
                    } else {
                        word(common.sample(&mut rng) as u64 - 1)
                    }
                })
                .collect();
            for _ in 0..cfg.rare_words {
                let pos = rng.random_range(0..=words.len());
                words.insert(pos, word(rare_base + rng.random_range(0..RARE_POOL)));
            }
            Document::new(i as DocId, words.join(" "), Some(label as usize))
        })
        .collect())
}
