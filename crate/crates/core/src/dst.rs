//! Dempster-Shafer evidence over the two-element frame {clean, unclean}.
//!
//! A [`MassFunction`] splits unit mass between `{C}`, `{U}` and the whole
//! frame `{C, U}`. Each shared feature contributes a discounted belief, the
//! beliefs are fused with Dempster's rule, and the fused `m({C})` is the
//! instance's evidential support.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DocId;
use crate::error::{Error, Result};
use crate::evidence::{EvidenceFeature, FeatureIndex};
use crate::par::Parallelism;

/// Default discount reserved for the whole frame.
pub const DEFAULT_DISCOUNT: f64 = 0.2;

const TOTAL_CONFLICT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassFunction {
    /// `m({C})`
    pub clean: f64,
    /// `m({U})`
    pub unclean: f64,
    /// `m({C, U})`
    pub either: f64,
}

impl MassFunction {
    pub const VACUOUS: MassFunction = MassFunction {
        clean: 0.0,
        unclean: 0.0,
        either: 1.0,
    };

    pub fn new(clean: f64, unclean: f64, either: f64) -> Result<Self> {
        let m = Self { clean, unclean, either };
        if !m.is_valid(1e-9) {
            return Err(Error::invalid(format!(
                "masses must be nonnegative and sum to 1, got ({clean}, {unclean}, {either})"
            )));
        }
        Ok(m)
    }

    pub fn total(&self) -> f64 {
        self.clean + self.unclean + self.either
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        [self.clean, self.unclean, self.either]
            .iter()
            .all(|&m| m >= 0.0 && m.is_finite())
            && (self.total() - 1.0).abs() <= tol
    }

    /// Mass on contradictory pairs, `m1(C)·m2(U) + m1(U)·m2(C)`.
    pub fn conflict(&self, other: &MassFunction) -> f64 {
        self.clean * other.unclean + self.unclean * other.clean
    }

    /// Dempster's rule of combination, renormalized by `1 - conflict`.
    ///
    /// Each numerator is written as `a·b + (x + y)` with the two cross terms
    /// grouped, which makes the result exactly commutative in floating point.
    pub fn combine(&self, other: &MassFunction) -> Result<MassFunction> {
        let conflict = self.conflict(other);
        if conflict >= 1.0 - TOTAL_CONFLICT_EPS {
            return Err(Error::TotalConflict(conflict));
        }
        let norm = 1.0 - conflict;
        let clean = (self.clean * other.clean + (self.clean * other.either + self.either * other.clean)) / norm;
        let unclean =
            (self.unclean * other.unclean + (self.unclean * other.either + self.either * other.unclean)) / norm;
        let either = self.either * other.either / norm;
        Ok(MassFunction { clean, unclean, either })
    }
}

pub fn combine(a: &MassFunction, b: &MassFunction) -> Result<MassFunction> {
    a.combine(b)
}

/// Discounted belief from one feature's support ratio:
/// `(1-d)·max(P, 1-P)` on `{C}`, `(1-d)·min(P, 1-P)` on `{U}` and `d` on the
/// frame. An unseen feature (`None`) gives the vacuous mass.
pub fn belief_from_feature(support_ratio: Option<f64>, discount: f64) -> Result<MassFunction> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::invalid(format!("discount must lie in (0, 1), got {discount}")));
    }
    let Some(p) = support_ratio else {
        return Ok(MassFunction::VACUOUS);
    };
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("support ratio must lie in [0, 1], got {p}")));
    }
    let keep = 1.0 - discount;
    Ok(MassFunction {
        clean: keep * p.max(1.0 - p),
        unclean: keep * p.min(1.0 - p),
        either: discount,
    })
}

/// Fuses the beliefs of all `features` (sorted into canonical order first)
/// and returns the combined mass.
pub fn combined_mass(features: &[EvidenceFeature], index: &FeatureIndex, discount: f64) -> Result<MassFunction> {
    if features.is_empty() {
        return Err(Error::invalid("an instance needs at least one feature"));
    }
    let mut ordered = features.to_vec();
    ordered.sort_unstable();
    ordered.iter().try_fold(MassFunction::VACUOUS, |acc, f| {
        acc.combine(&belief_from_feature(index.support_ratio(f), discount)?)
    })
}

/// Combined `m({C})` for one instance.
pub fn evidential_support(features: &[EvidenceFeature], index: &FeatureIndex, discount: f64) -> Result<f64> {
    Ok(combined_mass(features, index, discount)?.clean)
}

/// One instance to be ranked.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc_id: DocId,
    pub pseudo_label: usize,
    /// PT max-probability; first tie-breaker.
    pub confidence: f64,
    pub features: Vec<EvidenceFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: DocId,
    pub pseudo_label: usize,
    pub support: f64,
    pub confidence: f64,
}

/// Instances in descending support; ties by descending confidence, then
/// ascending id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedSet {
    pub entries: Vec<RankedEntry>,
}

impl RankedSet {
    pub fn from_scored(mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(|a, b| {
            b.support
                .total_cmp(&a.support)
                .then(b.confidence.total_cmp(&a.confidence))
                .then(a.doc_id.cmp(&b.doc_id))
        });
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<DocId> {
        self.entries.iter().map(|e| e.doc_id).collect()
    }

    /// CSV with header `doc_id,pseudo_label,support,rank` (rank from 1).
    pub fn write_csv(&self, path: &Path, label_name: impl Fn(usize) -> String) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["doc_id", "pseudo_label", "support", "rank"])?;
        for (i, e) in self.entries.iter().enumerate() {
            w.write_record([
                e.doc_id.to_string(),
                label_name(e.pseudo_label),
                e.support.to_string(),
                (i + 1).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSONL of `{doc_id, pseudo_label, support, rank}`.
    pub fn write_jsonl(&self, path: &Path, label_name: impl Fn(usize) -> String) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (i, e) in self.entries.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &serde_json::json!({
                    "doc_id": e.doc_id,
                    "pseudo_label": label_name(e.pseudo_label),
                    "support": e.support,
                    "rank": i + 1,
                }),
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every candidate (in parallel under `par`) and sorts.
pub fn rank(candidates: &[Candidate], index: &FeatureIndex, discount: f64, par: Parallelism) -> Result<RankedSet> {
    let scored = par.map(candidates, |c| {
        evidential_support(&c.features, index, discount).map(|support| RankedEntry {
            doc_id: c.doc_id,
            pseudo_label: c.pseudo_label,
            support,
            confidence: c.confidence,
        })
    });
    Ok(RankedSet::from_scored(scored.into_iter().collect::<Result<_>>()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub lambda: f64,
    pub proportion_accuracies: Vec<f64>,
    /// Leading proportions that meet `lambda`.
    pub prefix: usize,
    pub theta: f64,
}

/// `λ = max(p) - σ(p)` (population standard deviation); `θ` is the longest
/// leading run of proportions with accuracy `>= λ`, as a fraction of `len(p)`.
pub fn select_cutoff(proportion_accuracies: &[f64]) -> Result<Cutoff> {
    if proportion_accuracies.is_empty() {
        return Err(Error::invalid("no proportion accuracies"));
    }
    let n = proportion_accuracies.len() as f64;
    let max = proportion_accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = proportion_accuracies.iter().sum::<f64>() / n;
    let var = proportion_accuracies.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let lambda = max - var.sqrt();
    let prefix = proportion_accuracies.iter().take_while(|&&p| p >= lambda).count();
    Ok(Cutoff {
        lambda,
        proportion_accuracies: proportion_accuracies.to_vec(),
        prefix,
        theta: prefix as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::FeatureKind;

    fn m(c: f64, u: f64, e: f64) -> MassFunction {
        MassFunction::new(c, u, e).unwrap()
    }

    #[test]
    fn belief_examples() {
        assert_eq!(belief_from_feature(Some(1.0), 0.2).unwrap(), MassFunction { clean: 0.8, unclean: 0.0, either: 0.2 });
        let half = belief_from_feature(Some(0.5), 0.2).unwrap();
        assert!((half.clean - 0.4).abs() < 1e-15 && (half.unclean - 0.4).abs() < 1e-15);
        assert_eq!(belief_from_feature(None, 0.2).unwrap(), MassFunction::VACUOUS);
        assert!(belief_from_feature(Some(0.5), 0.0).is_err());
        assert!(belief_from_feature(Some(0.5), 1.0).is_err());
        // symmetric in P <-> 1 - P
        let (lo, hi) = (belief_from_feature(Some(0.1), 0.2).unwrap(), belief_from_feature(Some(0.9), 0.2).unwrap());
        assert!((lo.clean - hi.clean).abs() < 1e-15 && (lo.unclean - hi.unclean).abs() < 1e-15);
    }

    #[test]
    fn combine_worked_pair() {
        let a = m(0.8, 0.0, 0.2);
        let b = m(0.4, 0.4, 0.2);
        assert!((a.conflict(&b) - 0.32).abs() < 1e-15);
        let c = a.combine(&b).unwrap();
        // 0.56/0.68, 0.08/0.68, 0.04/0.68
        assert!((c.clean - 0.56 / 0.68).abs() < 1e-12);
        assert!((c.unclean - 0.08 / 0.68).abs() < 1e-12);
        assert!((c.either - 0.04 / 0.68).abs() < 1e-12);
        assert!((c.clean - 0.8235).abs() < 1e-4);
        assert!((c.unclean - 0.1176).abs() < 1e-4);
        assert!((c.either - 0.0588).abs() < 1e-4);
    }

    #[test]
    fn vacuous_is_identity_and_combine_commutes() {
        let a = m(0.3, 0.5, 0.2);
        assert_eq!(a.combine(&MassFunction::VACUOUS).unwrap(), a);
        assert_eq!(MassFunction::VACUOUS.combine(&a).unwrap(), a);
        let b = m(0.61, 0.04, 0.35);
        assert_eq!(a.combine(&b).unwrap(), b.combine(&a).unwrap());
    }

    #[test]
    fn total_conflict_is_an_error() {
        let c = m(1.0, 0.0, 0.0);
        let u = m(0.0, 1.0, 0.0);
        assert!(matches!(c.combine(&u), Err(Error::TotalConflict(_))));
    }

    #[test]
    fn support_examples() {
        let f = EvidenceFeature::new(FeatureKind::Semantic, 0, 0.2);
        let g = EvidenceFeature::new(FeatureKind::Confidence, 0, 0.9);
        let empty = FeatureIndex::default();
        assert_eq!(evidential_support(&[f, g], &empty, 0.2).unwrap(), 0.0);
        let idx = FeatureIndex::build(&[(0, vec![f]), (0, vec![f])], Parallelism::Sequential);
        assert!((evidential_support(&[f], &idx, 0.2).unwrap() - 0.8).abs() < 1e-15);
        assert!(evidential_support(&[], &idx, 0.2).is_err());
    }

    fn entry(id: DocId, support: f64, confidence: f64) -> RankedEntry {
        RankedEntry { doc_id: id, pseudo_label: 0, support, confidence }
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = RankedSet::from_scored(vec![entry(1, 0.9, 0.5), entry(2, 0.2, 0.5), entry(3, 0.5, 0.5)]);
        assert_eq!(r.ids(), vec![1, 3, 2]);
        let r = RankedSet::from_scored(vec![entry(1, 0.5, 0.7), entry(2, 0.5, 0.9)]);
        assert_eq!(r.ids(), vec![2, 1]);
        let r = RankedSet::from_scored(vec![entry(9, 0.5, 0.7), entry(4, 0.5, 0.7)]);
        assert_eq!(r.ids(), vec![4, 9]);
        let shuffled = RankedSet::from_scored(vec![entry(3, 0.5, 0.5), entry(2, 0.2, 0.5), entry(1, 0.9, 0.5)]);
        assert_eq!(shuffled.ids(), vec![1, 3, 2]);
    }

    #[test]
    fn cutoff_examples() {
        let c = select_cutoff(&[0.98, 0.95, 0.90, 0.80, 0.60]).unwrap();
        assert!((c.lambda - 0.8427).abs() < 1e-4);
        assert_eq!(c.prefix, 3);
        assert!((c.theta - 0.6).abs() < 1e-15);
        assert_eq!(select_cutoff(&[0.7; 6]).unwrap().theta, 1.0);
        assert_eq!(select_cutoff(&[0.1, 0.1, 0.1]).unwrap().theta, 1.0);
        assert_eq!(select_cutoff(&[0.9]).unwrap().theta, 1.0);
        assert!(select_cutoff(&[]).is_err());
    }
}
