//! The three-stage procedure: positive training on the labeled seed set,
//! pseudo-labeling plus evidential filtering of the unlabeled pool, then
//! negative training (followed by selective NT) on the mixture.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, DocId, Document};
use crate::dst::{self, Candidate, Cutoff, RankedSet};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::evidence::{self, ClassPrototypes, EvidenceFeature, FeatureIndex};
use crate::featurize::{SparseVector, VectorizerConfig};
use crate::losses;
use crate::model::{Classifier, Gradients, ModelConfig, Prediction};
use crate::par::Parallelism;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rnt,
    RntPure,
    RntPtconf,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Rnt => "rnt",
            Variant::RntPure => "rnt_pure",
            Variant::RntPtconf => "rnt_ptconf",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnt" => Ok(Variant::Rnt),
            "rnt_pure" => Ok(Variant::RntPure),
            "rnt_ptconf" => Ok(Variant::RntPtconf),
            other => Err(Error::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

/// Per-stage learning-rate schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - (e - 1) / E)` in epoch `e` of an `E`-epoch stage.
    #[default]
    Linear,
}

impl LrSchedule {
    pub fn rate(self, lr: f64, epoch_in_stage: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Linear => lr * (1.0 - (epoch_in_stage - 1) as f64 / epochs as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pt_epochs: usize,
    pub nt_epochs: usize,
    pub selnt_epochs: usize,
    pub lr: f64,
    /// Learning rate of the NT and SelNT phases; `lr` when absent.
    pub nt_lr: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub batch: usize,
    pub d_f: f64,
    pub n_prototypes: usize,
    pub variant: Variant,
    pub ptconf_threshold: f64,
    pub seed: u64,
    /// Number of Dev proportions used by the cutoff rule.
    pub proportions: usize,
    /// Pseudo-label / filter / NT passes; later rounds pseudo-label with the
    /// previous round's final model.
    pub rounds: usize,
    pub parallelism: Parallelism,
    pub model: ModelSection,
    pub vectorizer: VectorizerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pt_epochs: 30,
            nt_epochs: 30,
            selnt_epochs: 30,
            lr: 0.5,
            nt_lr: None,
            lr_schedule: LrSchedule::default(),
            batch: 32,
            d_f: dst::DEFAULT_DISCOUNT,
            n_prototypes: 5,
            variant: Variant::Rnt,
            ptconf_threshold: 0.9,
            seed: 0,
            proportions: 10,
            rounds: 1,
            parallelism: Parallelism::default(),
            model: ModelSection::default(),
            vectorizer: VectorizerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(toml::Deserializer::new(text)).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { String::new() } else { field }, e.inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pt_epochs", self.pt_epochs),
            ("nt_epochs", self.nt_epochs),
            ("selnt_epochs", self.selnt_epochs),
        ] {
            if v < 1 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and > 0"));
        }
        if let Some(lr) = self.nt_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("nt_lr", "must be finite and > 0"));
            }
        }
        if self.batch < 1 {
            return Err(Error::config("batch", "must be >= 1"));
        }
        if !(self.d_f > 0.0 && self.d_f < 1.0) {
            return Err(Error::config("d_f", "must lie in (0, 1)"));
        }
        if self.n_prototypes < 1 {
            return Err(Error::config("n_prototypes", "must be >= 1"));
        }
        if !(self.ptconf_threshold > 0.0 && self.ptconf_threshold < 1.0) {
            return Err(Error::config("ptconf_threshold", "must lie in (0, 1)"));
        }
        if self.proportions < 1 {
            return Err(Error::config("proportions", "must be >= 1"));
        }
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.model.embed_dim < 2 {
            return Err(Error::config("model.embed_dim", "must be >= 2"));
        }
        if !(self.model.init_std >= 0.0 && self.model.init_std.is_finite()) {
            return Err(Error::config("model.init_std", "must be finite and >= 0"));
        }
        self.vectorizer.validate()
    }

    pub fn nt_lr(&self) -> f64 {
        self.nt_lr.unwrap_or(self.lr)
    }

    pub fn model_config(&self, num_classes: usize, stage: &str) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            num_classes,
            buckets_log2: self.vectorizer.buckets_log2,
            init_std: self.model.init_std,
            seed: seed::derive(self.seed, stage),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pt,
    Nt,
    Selnt,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_conf_clean: Option<f64>,
    pub mean_conf_noisy: Option<f64>,
}

pub fn write_metrics_jsonl(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// A training example: encoded text, the label trained on, and (for noise
/// fixtures) whether that label is wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: DocId,
    pub x: SparseVector,
    pub label: usize,
    pub is_noisy: Option<bool>,
}

/// A labeled evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: DocId,
    pub x: SparseVector,
    pub gold: usize,
}

pub fn encode_train(docs: &[Document], cfg: &VectorizerConfig, par: Parallelism) -> Result<Vec<TrainItem>> {
    let xs = par.map(docs, |d| cfg.encode(&d.text));
    docs.iter()
        .zip(xs)
        .map(|(d, x)| {
            let label = d
                .gold_label
                .ok_or_else(|| Error::invalid(format!("document {} has no label to train on", d.id)))?;
            Ok(TrainItem {
                id: d.id,
                x,
                label,
                is_noisy: d.is_noisy,
            })
        })
        .collect()
}

pub fn encode_eval(docs: &[Document], cfg: &VectorizerConfig, par: Parallelism) -> Result<Vec<EvalItem>> {
    encode_train(docs, cfg, par).map(|items| {
        items
            .into_iter()
            .map(|t| EvalItem {
                id: t.id,
                x: t.x,
                gold: t.label,
            })
            .collect()
    })
}

pub fn predict_all(model: &Classifier, xs: &[&SparseVector], par: Parallelism) -> Vec<Prediction> {
    par.map(xs, |x| model.forward(x))
}

pub fn evaluate(model: &Classifier, items: &[EvalItem], par: Parallelism) -> Metrics {
    let preds = par.map(items, |it| model.forward(&it.x).argmax());
    let pairs: Vec<(usize, usize)> = preds.into_iter().zip(items.iter().map(|it| it.gold)).collect();
    eval::metrics_from_pairs(&pairs)
}

/// `(p[label], is_noisy)` for every training item that carries a noise flag.
pub fn training_confidences(model: &Classifier, items: &[TrainItem], par: Parallelism) -> Vec<(f64, bool)> {
    par.map(items, |it| it.is_noisy.map(|n| (model.forward(&it.x).probs[it.label], n)))
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Positive,
    /// NT with `K - 1` complementary labels per instance.
    Negative,
    /// NT restricted each epoch to instances whose current probability on
    /// their own label exceeds `1/K`.
    SelectiveNegative,
}

impl Objective {
    fn phase(self) -> Phase {
        match self {
            Objective::Positive => Phase::Pt,
            Objective::Negative => Phase::Nt,
            Objective::SelectiveNegative => Phase::Selnt,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage {
    pub objective: Objective,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best Dev macro-F1 (earliest on ties).
    pub best: Classifier,
    pub best_epoch: usize,
    pub last: Classifier,
    pub log: Vec<EpochRecord>,
    /// Instances trained on in each epoch, across stages.
    pub trained_per_epoch: Vec<usize>,
}

impl TrainOutcome {
    pub fn dev_trace(&self) -> Vec<f64> {
        self.log.iter().filter(|r| r.split == "dev").map(|r| r.accuracy).collect()
    }
}

/// Mini-batch SGD over `stages` in order, starting from `model`. Epoch
/// numbers run on across stages. Dev is scored after every epoch; the
/// training set is scored too when its items carry noise flags.
pub fn train(
    mut model: Classifier,
    items: &[TrainItem],
    dev: &[EvalItem],
    stages: &[Stage],
    batch: usize,
    run_seed: u64,
    par: Parallelism,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if batch < 1 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    let k = model.num_classes();
    if let Some(bad) = items.iter().find(|it| it.label >= k) {
        return Err(Error::invalid(format!("document {} has label {} >= K", bad.id, bad.label)));
    }
    let flagged = items.iter().any(|it| it.is_noisy.is_some());
    let mut log = Vec::new();
    let mut trained_per_epoch = Vec::new();
    let mut best: Option<(f64, usize, Classifier)> = None;
    let mut epoch = 0;
    for stage in stages {
        if stage.epochs < 1 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        let phase = stage.objective.phase();
        for e in 1..=stage.epochs {
            epoch += 1;
            let lr = stage.schedule.rate(stage.lr, e, stage.epochs);
            let mut order: Vec<usize> = match stage.objective {
                Objective::SelectiveNegative => {
                    let keep = par.map(items, |it| model.forward(&it.x).probs[it.label] > 1.0 / k as f64);
                    (0..items.len()).filter(|&i| keep[i]).collect()
                }
                _ => (0..items.len()).collect(),
            };
            let mut rng = seed::item_rng(run_seed, "train/shuffle", epoch as u64);
            order.shuffle(&mut rng);
            let mut comp_rng = seed::item_rng(run_seed, "train/complementary", epoch as u64);
            for chunk in order.chunks(batch) {
                let complementary: Vec<Vec<usize>> = match stage.objective {
                    Objective::Positive => Vec::new(),
                    _ => chunk
                        .iter()
                        .map(|&i| {
                            losses::sample_complementary(items[i].label, k, k - 1, &mut comp_rng)
                                .map(|s| s.complementary_labels)
                        })
                        .collect::<Result<_>>()?,
                };
                let outputs = par.map_range(chunk.len(), |j| {
                    let it = &items[chunk[j]];
                    let pred = model.forward(&it.x);
                    let out = match stage.objective {
                        Objective::Positive => losses::pt_loss(&pred.probs, it.label),
                        _ => losses::nt_loss_mean(&pred.probs, &complementary[j]),
                    };
                    (pred, out)
                });
                let scale = 1.0 / chunk.len() as f64;
                let mut grads = Gradients::zeros(model.config());
                for (j, (pred, out)) in outputs.iter().enumerate() {
                    if !out.loss.is_finite() {
                        return Err(Error::Divergence {
                            phase: format!("{phase:?}").to_lowercase(),
                            epoch,
                            detail: format!("non-finite loss on document {}", items[chunk[j]].id),
                        });
                    }
                    grads.accumulate(&model, &items[chunk[j]].x, pred, &out.grad, scale);
                }
                model.sgd_step(&grads, lr).map_err(|e| match e {
                    Error::NonFiniteGradient(what) => Error::Divergence {
                        phase: format!("{phase:?}").to_lowercase(),
                        epoch,
                        detail: format!("non-finite {what}"),
                    },
                    other => other,
                })?;
            }
            trained_per_epoch.push(order.len());

            let m = evaluate(&model, dev, par);
            log.push(EpochRecord {
                epoch,
                phase,
                split: "dev".into(),
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
                mean_conf_clean: None,
                mean_conf_noisy: None,
            });
            if flagged {
                let preds = par.map(items, |it| model.forward(&it.x));
                let pairs: Vec<(usize, usize)> =
                    preds.iter().zip(items).map(|(p, it)| (p.argmax(), it.label)).collect();
                let tm = eval::metrics_from_pairs(&pairs);
                let conf: Vec<(f64, bool)> = preds
                    .iter()
                    .zip(items)
                    .filter_map(|(p, it)| it.is_noisy.map(|n| (p.probs[it.label], n)))
                    .collect();
                let h = eval::confidence_histogram(&conf, 10)?;
                log.push(EpochRecord {
                    epoch,
                    phase,
                    split: "train".into(),
                    accuracy: tm.accuracy,
                    macro_f1: tm.macro_f1,
                    mean_conf_clean: h.mean_clean,
                    mean_conf_noisy: h.mean_noisy,
                });
            }
            if best.as_ref().is_none_or(|b| m.macro_f1 > b.0) {
                best = Some((m.macro_f1, epoch, model.clone()));
            }
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::config("stages", "no training stage given"))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
        trained_per_epoch,
    })
}

/// Encoded partitions of a split.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub labeled: Vec<TrainItem>,
    pub unlabeled: Vec<(DocId, SparseVector)>,
    pub dev: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
}

impl Encoded {
    pub fn new(split: &CorpusSplit, cfg: &PipelineConfig) -> Result<Self> {
        let par = cfg.parallelism;
        let v = &cfg.vectorizer;
        Ok(Self {
            labeled: encode_train(&split.labeled, v, par)?,
            unlabeled: split
                .unlabeled
                .iter()
                .zip(par.map(&split.unlabeled, |d| v.encode(&d.text)))
                .map(|(d, x)| (d.id, x))
                .collect(),
            dev: encode_eval(&split.dev, v, par)?,
            test: encode_eval(&split.test, v, par)?,
        })
    }
}

fn check_classes(split: &CorpusSplit) -> Result<()> {
    let present: BTreeSet<usize> = split.labeled.iter().filter_map(|d| d.gold_label).collect();
    if let Some(class) = (0..split.num_classes).find(|c| !present.contains(c)) {
        return Err(Error::UnrepresentedClass { class });
    }
    Ok(())
}

/// Cross-entropy training on the labeled set; see [`train`].
pub fn run_pt(split: &CorpusSplit, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate()?;
    check_classes(split)?;
    let enc = Encoded::new(split, cfg)?;
    run_pt_encoded(&enc, split.num_classes, cfg)
}

pub fn run_pt_encoded(enc: &Encoded, k: usize, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let model = Classifier::new(cfg.model_config(k, "pt/init"))?;
    let stages = [Stage {
        objective: Objective::Positive,
        epochs: cfg.pt_epochs,
        lr: cfg.lr,
        schedule: cfg.lr_schedule,
    }];
    train(model, &enc.labeled, &enc.dev, &stages, cfg.batch, seed::derive(cfg.seed, "pt"), cfg.parallelism)
}

/// NT for `nt_epochs`, then SelNT for `selnt_epochs`, from fresh weights.
pub fn run_nt(items: &[TrainItem], dev: &[EvalItem], k: usize, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let model = Classifier::new(cfg.model_config(k, "nt/init"))?;
    let lr = cfg.nt_lr();
    let stages = [
        Stage {
            objective: Objective::Negative,
            epochs: cfg.nt_epochs,
            lr,
            schedule: cfg.lr_schedule,
        },
        Stage {
            objective: Objective::SelectiveNegative,
            epochs: cfg.selnt_epochs,
            lr,
            schedule: cfg.lr_schedule,
        },
    ];
    train(model, items, dev, &stages, cfg.batch, seed::derive(cfg.seed, "nt"), cfg.parallelism)
}

/// Argmax class for every input id.
pub fn pseudo_label(model: &Classifier, unlabeled: &[(DocId, SparseVector)], par: Parallelism) -> BTreeMap<DocId, usize> {
    let preds = par.map(unlabeled, |(_, x)| model.forward(x).argmax());
    unlabeled.iter().map(|(id, _)| *id).zip(preds).collect()
}

/// The first `round(theta * n)` entries of the ranking.
pub fn filter_unlabeled(ranked: &RankedSet, theta: f64) -> Result<Vec<DocId>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::invalid("theta must lie in (0, 1]"));
    }
    let take = (theta * ranked.len() as f64).round() as usize;
    if take == 0 {
        return Err(Error::Empty(format!("selection (theta {theta} of {} instances)", ranked.len())));
    }
    Ok(ranked.ids()[..take].to_vec())
}

/// The labeled feature index and prototypes derived from a model.
pub struct Evidence {
    pub prototypes: ClassPrototypes,
    pub index: FeatureIndex,
}

impl Evidence {
    pub fn build(model: &Classifier, labeled: &[TrainItem], n_prototypes: usize, par: Parallelism) -> Result<Self> {
        let preds = par.map(labeled, |it| model.forward(&it.x));
        let triples: Vec<(DocId, usize, &Prediction)> =
            labeled.iter().zip(&preds).map(|(it, p)| (it.id, it.label, p)).collect();
        let prototypes = ClassPrototypes::select(&triples, model.num_classes(), n_prototypes)?;
        let feats: Vec<(usize, Vec<EvidenceFeature>)> = par
            .map(&preds, |p| evidence::generate_features(p, &prototypes))
            .into_iter()
            .zip(labeled)
            .map(|(f, it)| (it.label, f))
            .collect();
        let index = FeatureIndex::build(&feats, par);
        Ok(Self { prototypes, index })
    }

    pub fn candidates(&self, model: &Classifier, xs: &[(DocId, &SparseVector)], par: Parallelism) -> Vec<Candidate> {
        par.map(xs, |&(id, x)| {
            let p = model.forward(x);
            Candidate {
                doc_id: id,
                pseudo_label: p.argmax(),
                confidence: p.max_prob(),
                features: evidence::generate_features(&p, &self.prototypes),
            }
        })
    }

    pub fn rank(
        &self,
        model: &Classifier,
        xs: &[(DocId, &SparseVector)],
        discount: f64,
        par: Parallelism,
    ) -> Result<RankedSet> {
        dst::rank(&self.candidates(model, xs, par), &self.index, discount, par)
    }
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub pseudo_labels: BTreeMap<DocId, usize>,
    pub ranked: Option<RankedSet>,
    pub dev_ranked: Option<RankedSet>,
    pub cutoff: Option<Cutoff>,
    pub theta: f64,
    pub selected_ids: BTreeSet<DocId>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub variant: Variant,
    pub pt: TrainOutcome,
    pub pt_model: Classifier,
    pub final_model: Classifier,
    pub nt: TrainOutcome,
    pub pseudo_labels: BTreeMap<DocId, usize>,
    pub ranked: Option<RankedSet>,
    pub dev_ranked: Option<RankedSet>,
    pub cutoff: Option<Cutoff>,
    pub theta: f64,
    pub selected_ids: BTreeSet<DocId>,
    pub rounds: Vec<RoundReport>,
    /// PT then NT records of the last round.
    pub metrics_log: Vec<EpochRecord>,
}

fn assert_disjoint(train_ids: &BTreeSet<DocId>, split: &CorpusSplit) -> Result<()> {
    for (part, docs) in [("dev", &split.dev), ("test", &split.test)] {
        if let Some(d) = docs.iter().find(|d| train_ids.contains(&d.id)) {
            return Err(Error::invalid(format!("{part} document {} entered the training set", d.id)));
        }
    }
    Ok(())
}

/// The cutoff actually applied. When no leading proportion reaches λ the
/// top proportion alone is kept rather than aborting the run.
pub fn effective_theta(cutoff: &Cutoff) -> f64 {
    if cutoff.prefix == 0 {
        1.0 / cutoff.proportion_accuracies.len() as f64
    } else {
        cutoff.theta
    }
}

/// Runs the configured variant end to end.
pub fn run_variant(split: &CorpusSplit, cfg: &PipelineConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    split.validate()?;
    check_classes(split)?;
    if split.unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled pool".into()));
    }
    if split.dev.is_empty() {
        return Err(Error::Empty("dev partition".into()));
    }
    let par = cfg.parallelism;
    let k = split.num_classes;
    let enc = Encoded::new(split, cfg)?;
    let pt = run_pt_encoded(&enc, k, cfg)?;
    let pt_model = pt.best.clone();

    let mut labeler = pt_model.clone();
    let mut rounds = Vec::new();
    let mut nt = None;
    for round in 1..=cfg.rounds {
        let pseudo_labels = pseudo_label(&labeler, &enc.unlabeled, par);
        let (ranked, dev_ranked, cutoff, selected): (_, _, _, Vec<DocId>) = match cfg.variant {
            Variant::RntPure => (None, None, None, enc.unlabeled.iter().map(|(id, _)| *id).collect()),
            Variant::RntPtconf => {
                let conf = par.map(&enc.unlabeled, |(_, x)| labeler.forward(x).max_prob());
                let ids = enc
                    .unlabeled
                    .iter()
                    .zip(conf)
                    .filter(|(_, c)| *c >= cfg.ptconf_threshold)
                    .map(|((id, _), _)| *id)
                    .collect();
                (None, None, None, ids)
            }
            Variant::Rnt => {
                let ev = Evidence::build(&labeler, &enc.labeled, cfg.n_prototypes, par)?;
                let dev_xs: Vec<(DocId, &SparseVector)> = enc.dev.iter().map(|e| (e.id, &e.x)).collect();
                let dev_ranked = ev.rank(&labeler, &dev_xs, cfg.d_f, par)?;
                let gold: BTreeMap<DocId, usize> = enc.dev.iter().map(|e| (e.id, e.gold)).collect();
                let pairs: Vec<(usize, usize)> =
                    dev_ranked.entries.iter().map(|e| (e.pseudo_label, gold[&e.doc_id])).collect();
                let curve = eval::ranking_curve(&pairs, cfg.proportions)?;
                let cutoff = dst::select_cutoff(&curve.accuracies())?;
                let un_xs: Vec<(DocId, &SparseVector)> = enc.unlabeled.iter().map(|(id, x)| (*id, x)).collect();
                let ranked = ev.rank(&labeler, &un_xs, cfg.d_f, par)?;
                let selected = filter_unlabeled(&ranked, effective_theta(&cutoff))?;
                (Some(ranked), Some(dev_ranked), Some(cutoff), selected)
            }
        };
        let theta = match (&cutoff, cfg.variant) {
            (Some(c), _) => effective_theta(c),
            (None, Variant::RntPure) => 1.0,
            (None, _) => selected.len() as f64 / enc.unlabeled.len() as f64,
        };

        let mut items = enc.labeled.clone();
        let by_id: BTreeMap<DocId, &SparseVector> = enc.unlabeled.iter().map(|(id, x)| (*id, x)).collect();
        for id in &selected {
            items.push(TrainItem {
                id: *id,
                x: by_id[id].clone(),
                label: pseudo_labels[id],
                is_noisy: None,
            });
        }
        let train_ids: BTreeSet<DocId> = items.iter().map(|it| it.id).collect();
        if train_ids.len() != items.len() {
            return Err(Error::invalid("a document appears twice in the NT training set"));
        }
        assert_disjoint(&train_ids, split)?;

        let outcome = run_nt(&items, &enc.dev, k, cfg)?;
        labeler = outcome.best.clone();
        rounds.push(RoundReport {
            round,
            pseudo_labels,
            ranked,
            dev_ranked,
            cutoff,
            theta,
            selected_ids: selected.into_iter().collect(),
        });
        nt = Some(outcome);
    }
    let nt = nt.expect("at least one round");
    let last = rounds.last().expect("at least one round").clone();
    let mut metrics_log = pt.log.clone();
    metrics_log.extend(nt.log.iter().cloned());
    Ok(RunArtifacts {
        variant: cfg.variant,
        pt_model,
        final_model: nt.best.clone(),
        pt,
        nt,
        pseudo_labels: last.pseudo_labels,
        ranked: last.ranked,
        dev_ranked: last.dev_ranked,
        cutoff: last.cutoff,
        theta: last.theta,
        selected_ids: last.selected_ids,
        rounds,
        metrics_log,
    })
}

/// Pseudo-label accuracy of `ids` against the hidden gold labels.
pub fn pseudo_label_accuracy(
    ids: impl IntoIterator<Item = DocId>,
    pseudo: &BTreeMap<DocId, usize>,
    hidden_gold: &BTreeMap<DocId, usize>,
) -> Option<f64> {
    let (mut n, mut hit) = (0usize, 0usize);
    for id in ids {
        n += 1;
        hit += usize::from(pseudo.get(&id).is_some() && pseudo.get(&id) == hidden_gold.get(&id));
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            pt_epochs: 8,
            nt_epochs: 6,
            selnt_epochs: 3,
            lr: 1.0,
            batch: 8,
            vectorizer: VectorizerConfig {
                n_max: 1,
                buckets_log2: 12,
            },
            model: ModelSection {
                embed_dim: 8,
                init_std: 0.1,
            },
            parallelism: Parallelism::Sequential,
            ..PipelineConfig::default()
        }
    }

    /// Two classes with disjoint vocabularies.
    fn separable(n: usize) -> Vec<Document> {
        let words = [["alpha", "beta", "gamma", "delta"], ["red", "green", "blue", "white"]];
        (0..n)
            .map(|i| {
                let c = i % 2;
                let w = &words[c];
                let text = format!("{} {} {}", w[i % 4], w[(i / 2) % 4], w[(i / 3) % 4]);
                Document::new(i as DocId, text, Some(c))
            })
            .collect()
    }

    fn separable_split() -> CorpusSplit {
        let docs = separable(120);
        let (rest, test) = corpus::holdout(&docs, 0.2, 3).unwrap();
        corpus::split(&rest, 0.3, 0.2, 4).unwrap().with_test(test)
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = tiny_config();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let err = PipelineConfig::from_toml("pt_epochs = 0").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "pt_epochs"));
        let err = PipelineConfig::from_toml("[vectorizer]\nn_max = 0").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "vectorizer.n_max"));
        assert!(PipelineConfig::from_toml("nonsense = 1").is_err());
        assert!(PipelineConfig::from_toml("ptconf_threshold = 1.0").is_err());
        let v = PipelineConfig::from_toml("variant = \"rnt_pure\"").unwrap();
        assert_eq!(v.variant, Variant::RntPure);
    }

    #[test]
    fn pt_separates_toy_corpus() {
        let split = separable_split();
        let out = run_pt(&split, &tiny_config()).unwrap();
        let enc = Encoded::new(&split, &tiny_config()).unwrap();
        assert_eq!(evaluate(&out.best, &enc.dev, Parallelism::Sequential).accuracy, 1.0);
        assert_eq!(out.dev_trace().len(), 8);
    }

    #[test]
    fn pt_is_reproducible() {
        let split = separable_split();
        let a = run_pt(&split, &tiny_config()).unwrap();
        let b = run_pt(&split, &tiny_config()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = PipelineConfig {
            pt_epochs: 0,
            ..tiny_config()
        };
        assert!(matches!(run_pt(&separable_split(), &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn pseudo_labels_cover_inputs_and_break_ties_low() {
        let cfg = ModelConfig {
            embed_dim: 4,
            num_classes: 3,
            buckets_log2: 10,
            init_std: 0.0,
            seed: 1,
        };
        let model = Classifier::new(cfg).unwrap();
        let v = VectorizerConfig {
            n_max: 1,
            buckets_log2: 10,
        };
        let xs: Vec<(DocId, SparseVector)> = [(4, "a b"), (9, "c"), (2, "")].iter().map(|(i, t)| (*i, v.encode(t))).collect();
        let pl = pseudo_label(&model, &xs, Parallelism::Sequential);
        assert_eq!(pl.keys().copied().collect::<Vec<_>>(), vec![2, 4, 9]);
        assert!(pl.values().all(|&c| c == 0));
    }

    fn ranked(n: usize) -> RankedSet {
        RankedSet::from_scored(
            (0..n)
                .map(|i| dst::RankedEntry {
                    doc_id: i as DocId,
                    pseudo_label: 0,
                    support: 1.0 - i as f64 / n as f64,
                    confidence: 0.5,
                })
                .collect(),
        )
    }

    #[test]
    fn filter_examples() {
        let r = ranked(10);
        assert_eq!(filter_unlabeled(&r, 0.2).unwrap(), vec![0, 1]);
        assert_eq!(filter_unlabeled(&r, 1.0).unwrap().len(), 10);
        assert!(filter_unlabeled(&r, 0.01).is_err());
        assert!(filter_unlabeled(&r, 0.0).is_err());
        let small = filter_unlabeled(&r, 0.3).unwrap();
        let large = filter_unlabeled(&r, 0.7).unwrap();
        assert!(small.iter().all(|id| large.contains(id)));
    }

    #[test]
    fn selnt_with_no_confident_instances_leaves_model_unchanged() {
        let v = VectorizerConfig {
            n_max: 1,
            buckets_log2: 10,
        };
        let cfg = ModelConfig {
            embed_dim: 4,
            num_classes: 2,
            buckets_log2: 10,
            init_std: 0.0,
            seed: 0,
        };
        // A zero model gives exactly 1/K to every class, which is not above 1/K.
        let model = Classifier::new(cfg).unwrap();
        let items: Vec<TrainItem> = ["x y", "z"]
            .iter()
            .enumerate()
            .map(|(i, t)| TrainItem {
                id: i as DocId,
                x: v.encode(t),
                label: i,
                is_noisy: None,
            })
            .collect();
        let dev = vec![EvalItem {
            id: 9,
            x: v.encode("x"),
            gold: 0,
        }];
        let stages = [Stage {
            objective: Objective::SelectiveNegative,
            epochs: 2,
            lr: 1.0,
            schedule: LrSchedule::Constant,
        }];
        let out = train(model.clone(), &items, &dev, &stages, 4, 0, Parallelism::Sequential).unwrap();
        assert_eq!(out.trained_per_epoch, vec![0, 0]);
        assert_eq!(out.last, model);
    }

    #[test]
    fn nt_matches_pt_for_two_classes() {
        // With K = 2 the single complementary label is forced, and the NT
        // gradient equals the PT gradient, so identical seeds give identical runs.
        let split = separable_split();
        let cfg = tiny_config();
        let enc = Encoded::new(&split, &cfg).unwrap();
        let model = Classifier::new(cfg.model_config(2, "x")).unwrap();
        let run = |objective| {
            let stages = [Stage { objective, epochs: 5, lr: 0.7, schedule: LrSchedule::Linear }];
            train(model.clone(), &enc.labeled, &enc.dev, &stages, 8, 11, Parallelism::Sequential).unwrap()
        };
        let pt = run(Objective::Positive);
        let nt = run(Objective::Negative);
        for (a, b) in pt.dev_trace().iter().zip(nt.dev_trace()) {
            assert!((a - b).abs() <= 0.02);
        }
    }

    #[test]
    fn variants_select_as_specified() {
        let split = separable_split();
        let pure = run_variant(
            &split,
            &PipelineConfig {
                variant: Variant::RntPure,
                ..tiny_config()
            },
        )
        .unwrap();
        assert_eq!(pure.theta, 1.0);
        assert_eq!(pure.selected_ids.len(), split.unlabeled.len());
        assert!(pure.ranked.is_none());

        let rnt = run_variant(&split, &tiny_config()).unwrap();
        let n = split.unlabeled.len();
        assert_eq!(rnt.selected_ids.len(), (rnt.theta * n as f64).round() as usize);
        let ranked_ids = rnt.ranked.as_ref().unwrap().ids();
        assert!(rnt.selected_ids.iter().all(|id| ranked_ids[..rnt.selected_ids.len()].contains(id)));
        assert!(rnt.cutoff.is_some());
        let unl: BTreeSet<DocId> = split.unlabeled.iter().map(|d| d.id).collect();
        assert!(rnt.selected_ids.is_subset(&unl));
    }

    #[test]
    fn ptconf_thresholding() {
        // Two unlabeled documents: one sharing the labeled vocabulary, one
        // made of unseen words.
        let mut split = separable_split();
        split.unlabeled = vec![Document::new(1000, "alpha beta gamma delta alpha", None), Document::new(1001, "zzz qqq", None)];
        let cfg = PipelineConfig {
            variant: Variant::RntPtconf,
            ptconf_threshold: 0.9,
            ..tiny_config()
        };
        let out = run_variant(&split, &cfg).unwrap();
        let enc = Encoded::new(&split, &cfg).unwrap();
        let confs: Vec<f64> = enc.unlabeled.iter().map(|(_, x)| out.pt_model.forward(x).max_prob()).collect();
        assert!(confs[0] >= 0.9 && confs[1] < 0.9, "{confs:?}");
        assert_eq!(out.selected_ids, BTreeSet::from([1000]));
        assert_eq!(out.theta, 0.5);
    }

    #[test]
    fn leaked_dev_document_is_rejected() {
        let split = separable_split();
        let ids: BTreeSet<DocId> = [split.dev[0].id].into();
        assert!(assert_disjoint(&ids, &split).is_err());
    }

    #[test]
    fn empty_prefix_keeps_top_proportion() {
        let cut = dst::select_cutoff(&[0.5, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(cut.prefix, 0);
        assert_eq!(effective_theta(&cut), 0.25);
        let cut = dst::select_cutoff(&[0.98, 0.95, 0.90, 0.80, 0.60]).unwrap();
        assert_eq!(effective_theta(&cut), cut.theta);
    }
}
