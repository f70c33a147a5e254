//! Shared evidence features between labeled and unlabeled instances.
//!
//! Each instance emits one semantic-distance feature per class (mean negative
//! log similarity to that class's prototypes, rounded to one decimal) and one
//! confidence feature (predicted class, rounded max probability). Labeled
//! instances that emit a feature vote on how often it co-occurs with its
//! class: `P(f) = positive / total`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DocId;
use crate::error::{Error, Result};
use crate::model::{normalized_embedding, Prediction};
use crate::par::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Semantic,
    Confidence,
}

/// A discretized `(kind, class, value)` key. The value is held in tenths so
/// equality and hashing are exact. The derived ordering (semantic before
/// confidence, then class, then value) is the canonical fold order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EvidenceFeature {
    pub kind: FeatureKind,
    pub class_id: usize,
    pub tenths: u32,
}

impl EvidenceFeature {
    pub fn new(kind: FeatureKind, class_id: usize, value: f64) -> Self {
        Self {
            kind,
            class_id,
            tenths: to_tenths(value),
        }
    }

    pub fn value(&self) -> f64 {
        self.tenths as f64 / 10.0
    }
}

fn to_tenths(value: f64) -> u32 {
    // f64::round is half-away-from-zero.
    (value.max(0.0) * 10.0).round() as u32
}

/// Rounds to one decimal place, ties away from zero.
pub fn discretize(value: f64) -> f64 {
    to_tenths(value) as f64 / 10.0
}

/// `σ(θ) = (1 + θ) / 2`, mapping a cosine into `[0, 1]` before the log.
pub fn cosine_to_unit(cos: f64) -> f64 {
    (1.0 + cos.clamp(-1.0, 1.0)) / 2.0
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-(1/N) Σ_n log σ(cos(u, proto_n))` over one class's prototypes.
pub fn semantic_distance(u: &[f64], prototypes: &[Vec<f64>]) -> f64 {
    if prototypes.is_empty() {
        return 0.0;
    }
    let total: f64 = prototypes
        .iter()
        .map(|p| -cosine_to_unit(dot(u, p)).max(1e-12).ln())
        .sum();
    (total / prototypes.len() as f64).max(0.0)
}

/// Unit-norm embeddings of up to N labeled instances per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    per_class: Vec<Vec<Vec<f64>>>,
}

impl ClassPrototypes {
    pub fn from_embeddings(per_class: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if let Some(class) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("class {class} has no prototypes")));
        }
        Ok(Self { per_class })
    }

    /// Picks, per class, the `n` labeled instances with the highest
    /// probability on their gold class (ties by ascending id). Instances with
    /// a zero embedding are skipped.
    pub fn select(labeled: &[(DocId, usize, &Prediction)], k: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("need at least one prototype per class"));
        }
        let mut candidates: Vec<Vec<(f64, DocId, Vec<f64>)>> = vec![Vec::new(); k];
        for &(id, gold, pred) in labeled {
            if gold >= k {
                return Err(Error::invalid(format!("label {gold} out of range")));
            }
            if let Ok(u) = normalized_embedding(pred) {
                candidates[gold].push((pred.probs[gold], id, u));
            }
        }
        let per_class = candidates
            .into_iter()
            .map(|mut c| {
                c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                c.into_iter().take(n).map(|(_, _, u)| u).collect()
            })
            .collect();
        Self::from_embeddings(per_class)
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, c: usize) -> &[Vec<f64>] {
        &self.per_class[c]
    }
}

/// The `K + 1` features of one instance, in canonical order. A degenerate
/// (zero) embedding yields only the confidence feature.
pub fn generate_features(pred: &Prediction, prototypes: &ClassPrototypes) -> Vec<EvidenceFeature> {
    let k = prototypes.num_classes();
    let mut out = Vec::with_capacity(k + 1);
    if let Ok(u) = normalized_embedding(pred) {
        for c in 0..k {
            out.push(EvidenceFeature::new(
                FeatureKind::Semantic,
                c,
                semantic_distance(&u, prototypes.class(c)),
            ));
        }
    }
    out.push(EvidenceFeature::new(FeatureKind::Confidence, pred.argmax(), pred.max_prob()));
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCounts {
    pub total: u64,
    pub positive: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureIndex {
    counts: HashMap<EvidenceFeature, FeatureCounts>,
}

impl FeatureIndex {
    /// Counts, for every feature emitted by labeled instances, how many emit
    /// it and how many of those have the feature's class as gold label.
    /// Partial maps are built per chunk and merged in chunk order.
    pub fn build(labeled: &[(usize, Vec<EvidenceFeature>)], par: Parallelism) -> Self {
        let partials = par.map_chunks(labeled, 512, |chunk| {
            let mut m: HashMap<EvidenceFeature, FeatureCounts> = HashMap::new();
            for (gold, features) in chunk {
                for f in features {
                    let e = m.entry(*f).or_default();
                    e.total += 1;
                    e.positive += u64::from(f.class_id == *gold);
                }
            }
            m
        });
        let mut counts: HashMap<EvidenceFeature, FeatureCounts> = HashMap::new();
        for part in partials {
            for (f, c) in part {
                let e = counts.entry(f).or_default();
                e.total += c.total;
                e.positive += c.positive;
            }
        }
        Self { counts }
    }

    pub fn get(&self, f: &EvidenceFeature) -> Option<FeatureCounts> {
        self.counts.get(f).copied()
    }

    /// `P(f)`, or `None` when no labeled instance emits `f`.
    pub fn support_ratio(&self, f: &EvidenceFeature) -> Option<f64> {
        self.counts
            .get(f)
            .filter(|c| c.total > 0)
            .map(|c| c.positive as f64 / c.total as f64)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter_sorted(&self) -> Vec<(EvidenceFeature, FeatureCounts)> {
        let mut v: Vec<_> = self.counts.iter().map(|(f, c)| (*f, *c)).collect();
        v.sort_by_key(|e| e.0);
        v
    }

    /// JSONL of `{kind, class_id, value, total, positive}`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (f, c) in self.iter_sorted() {
            serde_json::to_writer(
                &mut w,
                &serde_json::json!({
                    "kind": f.kind,
                    "class_id": f.class_id,
                    "value": f.value(),
                    "total": c.total,
                    "positive": c.positive,
                }),
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// JSONL of `{doc_id, kind, class_id, value}`, one line per feature.
pub fn dump_features(path: &Path, features: &[(DocId, Vec<EvidenceFeature>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, fs) in features {
        for f in fs {
            serde_json::to_writer(
                &mut w,
                &serde_json::json!({
                    "doc_id": id,
                    "kind": f.kind,
                    "class_id": f.class_id,
                    "value": f.value(),
                }),
            )?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    fn pred(embedding: Vec<f64>, probs: Vec<f64>) -> Prediction {
        Prediction {
            embedding,
            logits: probs.iter().map(|p: &f64| p.ln()).collect(),
            probs,
        }
    }

    #[test]
    fn distance_examples() {
        let u = vec![1.0, 0.0];
        assert_eq!(semantic_distance(&u, &[u.clone(), u.clone()]), 0.0);
        // cosines 0.6 and 0.8
        let d = semantic_distance(&u, &[vec![0.6, 0.8], vec![0.8, 0.6]]);
        let expect = -0.5 * (0.8f64.ln() + 0.9f64.ln());
        assert!((d - expect).abs() < 1e-12);
        assert!((d - 0.1643).abs() < 1e-4);
        let orth = semantic_distance(&u, &[vec![0.0, 1.0]]);
        assert!((orth - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(0.213), 0.2);
        assert_eq!(discretize(0.25), 0.3);
        assert_eq!(discretize(0.0), 0.0);
        assert_eq!(discretize(0.84), 0.8);
    }

    #[test]
    fn features_compose_distance_and_confidence() {
        // Prototypes placed so the distances come out at 0.213 and 0.84.
        let cos_for = |l: f64| 2.0 * (-l).exp() - 1.0;
        let (c0, c1) = (cos_for(0.213), cos_for(0.84));
        let u = vec![1.0, 0.0];
        let proto = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let protos = ClassPrototypes::from_embeddings(vec![vec![proto(c0)], vec![proto(c1)]]).unwrap();
        let fs = generate_features(&pred(u, vec![0.87, 0.13]), &protos);
        assert_eq!(
            fs,
            vec![
                EvidenceFeature::new(FeatureKind::Semantic, 0, 0.2),
                EvidenceFeature::new(FeatureKind::Semantic, 1, 0.8),
                EvidenceFeature::new(FeatureKind::Confidence, 0, 0.9),
            ]
        );
    }

    #[test]
    fn argmax_tie_goes_to_lower_class() {
        let protos = ClassPrototypes::from_embeddings(vec![vec![unit(0.0)], vec![unit(1.0)]]).unwrap();
        let fs = generate_features(&pred(unit(0.3), vec![0.5, 0.5]), &protos);
        assert_eq!(fs.len(), 3);
        assert_eq!(fs[2].class_id, 0);
    }

    #[test]
    fn degenerate_embedding_emits_confidence_only() {
        let protos = ClassPrototypes::from_embeddings(vec![vec![unit(0.0)], vec![unit(1.0)]]).unwrap();
        let fs = generate_features(&pred(vec![0.0, 0.0], vec![0.3, 0.7]), &protos);
        assert_eq!(fs, vec![EvidenceFeature::new(FeatureKind::Confidence, 1, 0.7)]);
    }

    #[test]
    fn index_examples() {
        let f = EvidenceFeature::new(FeatureKind::Semantic, 0, 0.2);
        let idx = FeatureIndex::build(&[(0, vec![f]), (0, vec![f])], Parallelism::Sequential);
        assert_eq!(idx.get(&f), Some(FeatureCounts { total: 2, positive: 2 }));
        assert_eq!(idx.support_ratio(&f), Some(1.0));

        let idx = FeatureIndex::build(&[(0, vec![f]), (1, vec![f])], Parallelism::Sequential);
        assert_eq!(idx.support_ratio(&f), Some(0.5));

        let g = EvidenceFeature::new(FeatureKind::Confidence, 1, 0.9);
        assert_eq!(idx.support_ratio(&g), None);
        assert!(idx.get(&g).is_none());

        let quarter = FeatureIndex::build(
            &[(0, vec![f]), (1, vec![f]), (1, vec![f]), (1, vec![f])],
            Parallelism::Sequential,
        );
        assert_eq!(quarter.support_ratio(&f), Some(0.25));
    }

    #[test]
    fn prototypes_prefer_confident_instances() {
        let a = pred(unit(0.0), vec![0.9, 0.1]);
        let b = pred(unit(0.5), vec![0.6, 0.4]);
        let c = pred(unit(2.0), vec![0.2, 0.8]);
        let protos = ClassPrototypes::select(&[(1, 0, &b), (2, 0, &a), (3, 1, &c)], 2, 1).unwrap();
        assert_eq!(protos.class(0), &[unit(0.0)]);
        assert!(ClassPrototypes::select(&[(1, 0, &b)], 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_permutation_invariant_and_monotone(angles in prop::collection::vec(0.0f64..3.0, 1..6), shrink in 0.1f64..0.9) {
            let u = unit(0.0);
            let protos: Vec<Vec<f64>> = angles.iter().map(|&a| unit(a)).collect();
            let mut rev = protos.clone();
            rev.reverse();
            let d = semantic_distance(&u, &protos);
            prop_assert!(d >= 0.0);
            prop_assert!((d - semantic_distance(&u, &rev)).abs() < 1e-12);
            let closer: Vec<Vec<f64>> = angles.iter().map(|&a| unit(a * shrink)).collect();
            prop_assert!(semantic_distance(&u, &closer) <= d + 1e-12);
        }

        #[test]
        fn generate_emits_k_plus_one(k in 2usize..6, theta in 0.0f64..6.0) {
            let protos = ClassPrototypes::from_embeddings((0..k).map(|c| vec![unit(c as f64)]).collect()).unwrap();
            let probs = vec![1.0 / k as f64; k];
            let fs = generate_features(&pred(unit(theta), probs), &protos);
            prop_assert_eq!(fs.len(), k + 1);
            let classes: Vec<usize> = fs.iter().filter(|f| f.kind == FeatureKind::Semantic).map(|f| f.class_id).collect();
            prop_assert_eq!(classes, (0..k).collect::<Vec<_>>());
        }

        #[test]
        fn ratios_are_proper(labels in prop::collection::vec((0usize..3, 0u32..4), 1..60)) {
            let rows: Vec<(usize, Vec<EvidenceFeature>)> = labels
                .iter()
                .map(|&(g, v)| (g, vec![EvidenceFeature { kind: FeatureKind::Semantic, class_id: (v as usize) % 3, tenths: v }]))
                .collect();
            let idx = FeatureIndex::build(&rows, Parallelism::Rayon);
            prop_assert_eq!(&idx, &FeatureIndex::build(&rows, Parallelism::Sequential));
            for (f, c) in idx.iter_sorted() {
                let p = idx.support_ratio(&f).unwrap();
                prop_assert!((0.0..=1.0).contains(&p) && c.positive <= c.total);
                let scaled = p * c.total as f64;
                prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            }
        }
    }
}
