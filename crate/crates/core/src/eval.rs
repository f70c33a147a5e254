//! Metrics and the experimental probes: ranking curves, confidence
//! histograms and the denoising report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DocId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 over `(predicted, gold)` pairs.
///
/// Macro-F1 averages `2tp / (2tp + fp + fn)` over every class that occurs in
/// gold or predictions; a class that is never predicted scores 0.
pub fn metrics_from_pairs(pairs: &[(usize, usize)]) -> Metrics {
    if pairs.is_empty() {
        return Metrics {
            accuracy: 0.0,
            macro_f1: 0.0,
        };
    }
    let k = pairs.iter().map(|&(p, g)| p.max(g) + 1).max().unwrap_or(0);
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut correct = 0;
    for &(p, g) in pairs {
        if p == g {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut classes = 0;
    for c in 0..k {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            continue;
        }
        classes += 1;
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Metrics {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1: f1_sum / classes as f64,
    }
}

/// [`metrics_from_pairs`] over id-keyed maps; the id sets must match.
pub fn metrics(preds: &BTreeMap<DocId, usize>, gold: &BTreeMap<DocId, usize>) -> Result<Metrics> {
    if preds.len() != gold.len() || preds.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        let p: BTreeSet<_> = preds.keys().collect();
        let g: BTreeSet<_> = gold.keys().collect();
        let missing = g.difference(&p).count();
        let extra = p.difference(&g).count();
        return Err(Error::IdMismatch(format!(
            "{missing} gold ids without prediction, {extra} predictions without gold"
        )));
    }
    let pairs: Vec<(usize, usize)> = preds.values().copied().zip(gold.values().copied()).collect();
    Ok(metrics_from_pairs(&pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub index: usize,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingCurve {
    pub proportion_count: usize,
    pub proportions: Vec<Proportion>,
}

impl RankingCurve {
    pub fn accuracies(&self) -> Vec<f64> {
        self.proportions.iter().map(|p| p.accuracy).collect()
    }

    /// CSV `proportion_index,accuracy`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["proportion_index", "accuracy"])?;
        for p in &self.proportions {
            w.write_record([p.index.to_string(), p.accuracy.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits a ranked list of `(pseudo, gold)` pairs into `proportions`
/// contiguous chunks of `floor(n / P)` (the last absorbs the remainder) and
/// scores each. With fewer instances than proportions, one per instance.
pub fn ranking_curve(ranked: &[(usize, usize)], proportions: usize) -> Result<RankingCurve> {
    if proportions < 1 {
        return Err(Error::invalid("need at least one proportion"));
    }
    if ranked.is_empty() {
        return Err(Error::Empty("ranked set".into()));
    }
    let count = proportions.min(ranked.len());
    let size = ranked.len() / count;
    let proportions = (0..count)
        .map(|i| {
            let start = i * size;
            let end = if i + 1 == count { ranked.len() } else { start + size };
            let m = metrics_from_pairs(&ranked[start..end]);
            Proportion {
                index: i,
                n: end - start,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
            }
        })
        .collect();
    Ok(RankingCurve {
        proportion_count: count,
        proportions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub bins: usize,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub mean_clean: Option<f64>,
    pub mean_noisy: Option<f64>,
}

impl ConfidenceHistogram {
    /// `mean_clean - mean_noisy`, when both groups are non-empty.
    pub fn gap(&self) -> Option<f64> {
        Some(self.mean_clean? - self.mean_noisy?)
    }
}

/// Left-closed bin of a confidence in `[0, 1]`; 1.0 falls in the top bin.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Histograms of `(confidence, is_noisy)` pairs, where confidence is the
/// probability the model gives to the training label.
pub fn confidence_histogram(samples: &[(f64, bool)], bins: usize) -> Result<ConfidenceHistogram> {
    if bins < 1 {
        return Err(Error::invalid("need at least one bin"));
    }
    let mut clean = vec![0; bins];
    let mut noisy = vec![0; bins];
    let (mut sum_c, mut sum_n) = (0.0, 0.0);
    for &(c, is_noisy) in samples {
        if is_noisy {
            noisy[bin_index(c, bins)] += 1;
            sum_n += c;
        } else {
            clean[bin_index(c, bins)] += 1;
            sum_c += c;
        }
    }
    let (nc, nn): (usize, usize) = (clean.iter().sum(), noisy.iter().sum());
    Ok(ConfidenceHistogram {
        bins,
        mean_clean: (nc > 0).then(|| sum_c / nc as f64),
        mean_noisy: (nn > 0).then(|| sum_n / nn as f64),
        clean,
        noisy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub clean_acc: f64,
    pub noisy_acc: f64,
    /// Share of truly clean instances among the top `selection_fraction` of
    /// the ranking.
    pub denoising_accuracy: f64,
    pub selection_fraction: f64,
}

/// One ranked instance for [`denoise_eval`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseItem {
    pub is_noisy: bool,
    /// The model's prediction matches gold.
    pub correct: bool,
}

pub fn denoise_eval(ranked: &[DenoiseItem], selection_fraction: f64) -> Result<DenoiseReport> {
    if ranked.is_empty() {
        return Err(Error::Empty("ranked dev set".into()));
    }
    if !(selection_fraction > 0.0 && selection_fraction <= 1.0) {
        return Err(Error::invalid("selection fraction must lie in (0, 1]"));
    }
    let acc = |noisy: bool| {
        let group: Vec<_> = ranked.iter().filter(|i| i.is_noisy == noisy).collect();
        if group.is_empty() {
            0.0
        } else {
            group.iter().filter(|i| i.correct).count() as f64 / group.len() as f64
        }
    };
    let top = ((selection_fraction * ranked.len() as f64).round() as usize).max(1);
    let clean_in_top = ranked[..top].iter().filter(|i| !i.is_noisy).count();
    Ok(DenoiseReport {
        clean_acc: acc(false),
        noisy_acc: acc(true),
        denoising_accuracy: clean_in_top as f64 / top as f64,
        selection_fraction,
    })
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
