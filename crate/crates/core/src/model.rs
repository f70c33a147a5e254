//! Two-layer linear text classifier: sparse input -> dense embedding ->
//! class logits -> softmax.
//!
//! The embedding table has `2^B` rows but is materialized lazily: a row that
//! was never updated is regenerated on demand from its own ChaCha stream, so
//! the model behaves exactly like a densely initialized one while only
//! storing the rows that training touched.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::SparseVector;
use crate::seed;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RNTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub buckets_log2: u32,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::config("model.embed_dim", "must be >= 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        if !(10..=30).contains(&self.buckets_log2) {
            return Err(Error::config("model.buckets_log2", "must lie in [10, 30]"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("model.init_std", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Predicted class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Unit-length copy of the embedding, for cosine features only.
pub fn normalized_embedding(pred: &Prediction) -> Result<Vec<f64>> {
    let norm = pred.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < f64::MIN_POSITIVE {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(pred.embedding.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone)]
pub struct Classifier {
    config: ModelConfig,
    row_of: HashMap<u32, usize>,
    rows: Vec<f64>,
    /// `embed_dim x num_classes`, row-major.
    class_weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PartialEq for Classifier {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.class_weights == other.class_weights
            && self.bias == other.bias
            && self.sorted_rows() == other.sorted_rows()
    }
}

impl Classifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.embed_dim, config.num_classes);
        let mut class_weights = vec![0.0; d * k];
        if config.init_std > 0.0 {
            let normal = Normal::new(0.0, config.init_std).expect("validated std");
            let mut rng = seed::stage_rng(config.seed, "init/class-head");
            for w in &mut class_weights {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            config,
            row_of: HashMap::new(),
            rows: Vec::new(),
            class_weights,
            bias: vec![0.0; k],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn class_weights_mut(&mut self) -> &mut [f64] {
        &mut self.class_weights
    }

    /// Number of embedding rows that differ from their lazy initialization.
    pub fn materialized_rows(&self) -> usize {
        self.row_of.len()
    }

    fn init_row(&self, bucket: u32, out: &mut [f64]) {
        if self.config.init_std == 0.0 {
            out.fill(0.0);
            return;
        }
        let normal = Normal::new(0.0, self.config.init_std).expect("validated std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.config.seed, "init/embed"));
        rng.set_stream(bucket as u64);
        for x in out.iter_mut() {
            *x = normal.sample(&mut rng);
        }
    }

    /// Current value of one embedding row.
    pub fn embedding_row(&self, bucket: u32) -> Vec<f64> {
        let d = self.config.embed_dim;
        match self.row_of.get(&bucket) {
            Some(&r) => self.rows[r * d..(r + 1) * d].to_vec(),
            None => {
                let mut out = vec![0.0; d];
                self.init_row(bucket, &mut out);
                out
            }
        }
    }

    fn row_mut(&mut self, bucket: u32) -> &mut [f64] {
        let d = self.config.embed_dim;
        let r = match self.row_of.get(&bucket) {
            Some(&r) => r,
            None => {
                let mut fresh = vec![0.0; d];
                self.init_row(bucket, &mut fresh);
                let r = self.row_of.len();
                self.rows.extend_from_slice(&fresh);
                self.row_of.insert(bucket, r);
                r
            }
        };
        &mut self.rows[r * d..(r + 1) * d]
    }

    fn sorted_rows(&self) -> Vec<(u32, &[f64])> {
        let d = self.config.embed_dim;
        let mut out: Vec<(u32, &[f64])> = self
            .row_of
            .iter()
            .map(|(&b, &r)| (b, &self.rows[r * d..(r + 1) * d]))
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn embed(&self, x: &SparseVector) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut e = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        for &(bucket, w) in x.entries() {
            debug_assert!((bucket as usize) < (1usize << self.config.buckets_log2));
            let row = match self.row_of.get(&bucket) {
                Some(&r) => &self.rows[r * d..(r + 1) * d],
                None => {
                    self.init_row(bucket, &mut scratch);
                    &scratch[..]
                }
            };
            for (acc, v) in e.iter_mut().zip(row) {
                *acc += w * v;
            }
        }
        e
    }

    pub fn forward(&self, x: &SparseVector) -> Prediction {
        let embedding = self.embed(x);
        let k = self.config.num_classes;
        let mut logits = self.bias.clone();
        for (j, &ej) in embedding.iter().enumerate() {
            if ej == 0.0 {
                continue;
            }
            let row = &self.class_weights[j * k..(j + 1) * k];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += ej * w;
            }
        }
        let probs = softmax(&logits);
        Prediction {
            embedding,
            logits,
            probs,
        }
    }

    /// Applies `param -= lr * grad` to every parameter the gradient touches.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite"));
        }
        grads.check_shape(&self.config)?;
        grads.check_finite()?;
        for (p, g) in self.bias.iter_mut().zip(&grads.bias) {
            *p -= lr * g;
        }
        for (p, g) in self.class_weights.iter_mut().zip(&grads.class_weights) {
            *p -= lr * g;
        }
        let mut finite = self.bias.iter().chain(&self.class_weights).all(|p| p.is_finite());
        for (&bucket, g) in &grads.embed {
            for (p, g) in self.row_mut(bucket).iter_mut().zip(g) {
                *p -= lr * g;
                finite &= p.is_finite();
            }
        }
        if !finite {
            return Err(Error::NonFiniteGradient("parameters after update"));
        }
        Ok(())
    }

    /// Writes the binary checkpoint: magic, version, JSON manifest, then
    /// little-endian f64 parameters (bias, class head, sorted embedding rows).
    pub fn save(&self, path: &Path, training: &serde_json::Value) -> Result<()> {
        let manifest = serde_json::to_vec(&serde_json::json!({
            "format": "rnt-checkpoint",
            "version": CHECKPOINT_VERSION,
            "model": self.config,
            "training": training,
            "rows": self.row_of.len(),
        }))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        for x in self.bias.iter().chain(&self.class_weights) {
            w.write_all(&x.to_le_bytes())?;
        }
        let rows = self.sorted_rows();
        w.write_all(&(rows.len() as u64).to_le_bytes())?;
        for (bucket, row) in rows {
            w.write_all(&bucket.to_le_bytes())?;
            for x in row {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)?;
        let manifest: serde_json::Value = serde_json::from_slice(&manifest)?;
        let config: ModelConfig = serde_json::from_value(manifest["model"].clone())?;
        let mut model = Classifier::new(config)?;
        let (d, k) = (model.config.embed_dim, model.config.num_classes);
        for x in model.bias.iter_mut() {
            *x = read_f64(&mut r)?;
        }
        for x in model.class_weights.iter_mut() {
            *x = read_f64(&mut r)?;
        }
        let n_rows = read_u64(&mut r)? as usize;
        model.rows = Vec::with_capacity(n_rows * d);
        for i in 0..n_rows {
            let bucket = read_u32(&mut r)?;
            for _ in 0..d {
                model.rows.push(read_f64(&mut r)?);
            }
            model.row_of.insert(bucket, i);
        }
        debug_assert_eq!(model.bias.len(), k);
        Ok(model)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Gradient of a (mini-batch) loss. Embedding rows are sparse and kept in
/// bucket order so that updates are applied deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: BTreeMap<u32, Vec<f64>>,
    pub class_weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            embed: BTreeMap::new(),
            class_weights: vec![0.0; config.embed_dim * config.num_classes],
            bias: vec![0.0; config.num_classes],
        }
    }

    /// Back-propagates `scale * grad_logits` for one example through the head
    /// and the embedding table, adding into `self`.
    pub fn accumulate(
        &mut self,
        model: &Classifier,
        x: &SparseVector,
        pred: &Prediction,
        grad_logits: &[f64],
        scale: f64,
    ) {
        let (d, k) = (model.config.embed_dim, model.config.num_classes);
        for (g, gz) in self.bias.iter_mut().zip(grad_logits) {
            *g += scale * gz;
        }
        let mut grad_embed = vec![0.0; d];
        for (j, ge) in grad_embed.iter_mut().enumerate() {
            let row = &model.class_weights[j * k..(j + 1) * k];
            let grow = &mut self.class_weights[j * k..(j + 1) * k];
            let ej = pred.embedding[j];
            let mut acc = 0.0;
            for c in 0..k {
                grow[c] += scale * ej * grad_logits[c];
                acc += row[c] * grad_logits[c];
            }
            *ge = acc;
        }
        for &(bucket, w) in x.entries() {
            let g = self.embed.entry(bucket).or_insert_with(|| vec![0.0; d]);
            for (gi, ge) in g.iter_mut().zip(&grad_embed) {
                *gi += scale * w * ge;
            }
        }
    }

    fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.bias.len() == config.num_classes
            && self.class_weights.len() == config.embed_dim * config.num_classes
            && self.embed.values().all(|g| g.len() == config.embed_dim);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("gradient shape does not match the model"))
        }
    }

    fn check_finite(&self) -> Result<()> {
        if !self.bias.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("bias"));
        }
        if !self.class_weights.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("class head"));
        }
        if !self.embed.values().flatten().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("embedding"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::vectorize;

    fn config(std: f64) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_classes: 3,
            buckets_log2: 12,
            init_std: std,
            seed: 42,
        }
    }

    fn x(words: &[&str]) -> SparseVector {
        vectorize(&words.iter().map(|s| s.to_string()).collect::<Vec<_>>(), 2, 12)
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Classifier::new(config(0.0)).unwrap();
        let p = m.forward(&x(&["any", "text"]));
        for q in &p.probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_input_gives_softmax_of_bias() {
        let mut m = Classifier::new(config(0.02)).unwrap();
        m.bias_mut().copy_from_slice(&[1.0, 0.0, -1.0]);
        let p = m.forward(&SparseVector::default());
        assert!(p.embedding.iter().all(|&e| e == 0.0));
        assert_eq!(p.probs, softmax(&[1.0, 0.0, -1.0]));
    }

    #[test]
    fn probs_sum_to_one() {
        let m = Classifier::new(config(1.0)).unwrap();
        let p = m.forward(&x(&["some", "random", "words"]));
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.probs.iter().all(|&q| q > 0.0));
    }

    #[test]
    fn normalized_embedding_cases() {
        let pred = |e: Vec<f64>| Prediction {
            embedding: e,
            logits: vec![],
            probs: vec![],
        };
        let u = normalized_embedding(&pred(vec![3.0, 4.0])).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalized_embedding(&pred(vec![1.0, 0.0])).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            normalized_embedding(&pred(vec![0.0, 0.0])),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn sgd_arithmetic_and_zero_lr() {
        let mut m = Classifier::new(config(0.02)).unwrap();
        m.bias_mut()[0] = 1.0;
        let mut g = Gradients::zeros(m.config());
        g.bias[0] = 2.0;
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.1).unwrap();
        assert!((m.bias()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut m = Classifier::new(config(0.02)).unwrap();
        let mut g = Gradients::zeros(m.config());
        g.embed.insert(3, vec![f64::NAN; 8]);
        assert!(matches!(m.sgd_step(&g, 0.1), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn identical_steps_are_identical() {
        let input = x(&["alpha", "beta"]);
        let run = || {
            let mut m = Classifier::new(config(0.1)).unwrap();
            let pred = m.forward(&input);
            let mut g = Gradients::zeros(m.config());
            g.accumulate(&m, &input, &pred, &[0.3, -0.1, -0.2], 1.0);
            m.sgd_step(&g, 0.5).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lazy_rows_match_materialized_rows() {
        let mut m = Classifier::new(config(0.5)).unwrap();
        let before = m.embedding_row(77);
        let g = Gradients {
            embed: [(77, vec![0.0; 8])].into_iter().collect(),
            ..Gradients::zeros(m.config())
        };
        m.sgd_step(&g, 1.0).unwrap();
        assert_eq!(m.materialized_rows(), 1);
        assert_eq!(m.embedding_row(77), before);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        // d/dθ of sum_k c_k * logit_k for an arbitrary fixed c.
        let input = x(&["gradient", "check", "words"]);
        let coef = [0.7, -0.4, 0.2];
        let mut m = Classifier::new(config(0.3)).unwrap();
        let objective = |m: &Classifier| {
            let p = m.forward(&input);
            p.logits.iter().zip(&coef).map(|(z, c)| z * c).sum::<f64>()
        };
        let pred = m.forward(&input);
        let mut g = Gradients::zeros(m.config());
        g.accumulate(&m, &input, &pred, &coef, 1.0);
        let eps = 1e-6;
        for idx in [0usize, 5, 17] {
            let orig = m.class_weights()[idx];
            m.class_weights_mut()[idx] = orig + eps;
            let up = objective(&m);
            m.class_weights_mut()[idx] = orig - eps;
            let down = objective(&m);
            m.class_weights_mut()[idx] = orig;
            assert!(((up - down) / (2.0 * eps) - g.class_weights[idx]).abs() < 1e-7);
        }
        let (&bucket, analytic) = g.embed.iter().next().unwrap();
        for j in [0usize, 3, 7] {
            let mut probe = Gradients::zeros(m.config());
            let mut delta = vec![0.0; 8];
            delta[j] = -eps;
            probe.embed.insert(bucket, delta.clone());
            let mut up = m.clone();
            up.sgd_step(&probe, 1.0).unwrap();
            delta[j] = eps;
            probe.embed.insert(bucket, delta);
            let mut down = m.clone();
            down.sgd_step(&probe, 1.0).unwrap();
            let numeric = (objective(&up) - objective(&down)) / (2.0 * eps);
            assert!((numeric - analytic[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let input = x(&["save", "me"]);
        let mut m = Classifier::new(config(0.1)).unwrap();
        let pred = m.forward(&input);
        let mut g = Gradients::zeros(m.config());
        g.accumulate(&m, &input, &pred, &[0.1, 0.2, -0.3], 1.0);
        m.sgd_step(&g, 0.5).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path(), &serde_json::json!({"lr": 0.5})).unwrap();
        let back = Classifier::load(f.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.forward(&input), m.forward(&input));
    }
}
