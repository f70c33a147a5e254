//! Experimental probes on top of the pipeline: PT vs NT under injected label
//! noise, Dev ranking curves, and denoising of perturbed Dev text.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusSplit, DocId, Document, NoiseReport};
use crate::dst::RankedSet;
use crate::error::{Error, Result};
use crate::eval::{self, ConfidenceHistogram, DenoiseItem, DenoiseReport, RankingCurve};
use crate::featurize::SparseVector;
use crate::model::Classifier;
use crate::pipeline::{self, Evidence, Objective, PipelineConfig, Stage, TrainOutcome};
use crate::seed;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone)]
pub struct NoiseProbe {
    pub noise: NoiseReport,
    pub pt: TrainOutcome,
    pub nt: TrainOutcome,
    /// Training-label confidence of the last PT / NT models.
    pub pt_hist: ConfidenceHistogram,
    pub nt_hist: ConfidenceHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub flipped: usize,
    pub pt_gap: Option<f64>,
    pub nt_gap: Option<f64>,
    pub pt_dev_trace: Vec<f64>,
    pub nt_dev_trace: Vec<f64>,
    pub pt_hist: ConfidenceHistogram,
    pub nt_hist: ConfidenceHistogram,
}

impl NoiseProbe {
    pub fn summary(&self) -> NoiseSummary {
        NoiseSummary {
            flipped: self.noise.flipped,
            pt_gap: self.pt_hist.gap(),
            nt_gap: self.nt_hist.gap(),
            pt_dev_trace: self.pt.dev_trace(),
            nt_dev_trace: self.nt.dev_trace(),
            pt_hist: self.pt_hist.clone(),
            nt_hist: self.nt_hist.clone(),
        }
    }
}

/// Corrupts `rate` of `train` with symmetric noise, then trains one model
/// with PT (`pt_epochs`) and one with NT (`nt_epochs`) on the noisy labels,
/// both from the same initialization.
pub fn noise_probe(train: &[Document], dev: &[Document], k: usize, rate: f64, cfg: &PipelineConfig) -> Result<NoiseProbe> {
    cfg.validate()?;
    let par = cfg.parallelism;
    let (noisy, noise) = corpus::inject_symmetric_noise(train, rate, k, seed::derive(cfg.seed, "probe/noise"))?;
    let items = pipeline::encode_train(&noisy, &cfg.vectorizer, par)?;
    let dev = pipeline::encode_eval(dev, &cfg.vectorizer, par)?;
    let init = Classifier::new(cfg.model_config(k, "probe/init"))?;
    let run = |objective, epochs, lr| {
        let stages = [Stage { objective, epochs, lr, schedule: cfg.lr_schedule }];
        pipeline::train(init.clone(), &items, &dev, &stages, cfg.batch, seed::derive(cfg.seed, "probe/train"), par)
    };
    let pt = run(Objective::Positive, cfg.pt_epochs, cfg.lr)?;
    let nt = run(Objective::Negative, cfg.nt_epochs, cfg.nt_lr())?;
    let pt_hist = eval::confidence_histogram(&pipeline::training_confidences(&pt.last, &items, par), HISTOGRAM_BINS)?;
    let nt_hist = eval::confidence_histogram(&pipeline::training_confidences(&nt.last, &items, par), HISTOGRAM_BINS)?;
    Ok(NoiseProbe {
        noise,
        pt,
        nt,
        pt_hist,
        nt_hist,
    })
}

fn dev_gold(dev: &[Document]) -> Result<BTreeMap<DocId, usize>> {
    dev.iter()
        .map(|d| {
            d.gold_label
                .map(|g| (d.id, g))
                .ok_or_else(|| Error::invalid(format!("dev document {} has no gold label", d.id)))
        })
        .collect()
}

/// Ranks `docs` (pseudo-labeled by `model`) by evidential support from the
/// labeled set of `split`.
pub fn rank_documents(model: &Classifier, split: &CorpusSplit, docs: &[Document], cfg: &PipelineConfig) -> Result<RankedSet> {
    let par = cfg.parallelism;
    let labeled = pipeline::encode_train(&split.labeled, &cfg.vectorizer, par)?;
    let ev = Evidence::build(model, &labeled, cfg.n_prototypes, par)?;
    let xs: Vec<SparseVector> = par.map(docs, |d| cfg.vectorizer.encode(&d.text));
    let pairs: Vec<(DocId, &SparseVector)> = docs.iter().map(|d| d.id).zip(&xs).collect();
    ev.rank(model, &pairs, cfg.d_f, par)
}

/// Ranking curve of the Dev set pseudo-labeled by `model`.
pub fn dev_ranking_curve(model: &Classifier, split: &CorpusSplit, cfg: &PipelineConfig) -> Result<RankingCurve> {
    let ranked = rank_documents(model, split, &split.dev, cfg)?;
    let gold = dev_gold(&split.dev)?;
    let pairs: Vec<(usize, usize)> = ranked.entries.iter().map(|e| (e.pseudo_label, gold[&e.doc_id])).collect();
    eval::ranking_curve(&pairs, cfg.proportions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSettings {
    pub instance_rate: f64,
    pub word_rate: f64,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self {
            instance_rate: 0.3,
            word_rate: 0.3,
        }
    }
}

/// Perturbs the text of a share of Dev, ranks the result with `model` and
/// scores how well the top of the ranking avoids the perturbed instances.
/// The selection budget is `1 - instance_rate`.
pub fn denoise_probe(
    model: &Classifier,
    split: &CorpusSplit,
    perturb: PerturbSettings,
    cfg: &PipelineConfig,
) -> Result<DenoiseReport> {
    let perturbed = corpus::perturb_instances(
        &split.dev,
        perturb.instance_rate,
        perturb.word_rate,
        seed::derive(cfg.seed, "probe/perturb"),
    );
    let ranked = rank_documents(model, split, &perturbed, cfg)?;
    let gold = dev_gold(&perturbed)?;
    let noisy: BTreeMap<DocId, bool> = perturbed.iter().map(|d| (d.id, d.noisy())).collect();
    let items: Vec<DenoiseItem> = ranked
        .entries
        .iter()
        .map(|e| DenoiseItem {
            is_noisy: noisy[&e.doc_id],
            correct: gold[&e.doc_id] == e.pseudo_label,
        })
        .collect();
    eval::denoise_eval(&items, 1.0 - perturb.instance_rate)
}
