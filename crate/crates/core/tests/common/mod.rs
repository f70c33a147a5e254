#![allow(dead_code)]

use std::path::PathBuf;

use rnt::corpus::{self, CorpusSplit, Document, Format, LabelMap};
use rnt::pipeline::PipelineConfig;

pub const NOISE_DOCS: usize = 3000;
pub const NOISE_DEV_FRACTION: f64 = 1.0 / 3.0;
pub const NOISE_RATE: f64 = 0.3;
pub const E2E_TEST_FRACTION: f64 = 0.2;
pub const E2E_LABELED_FRACTION: f64 = 0.1;
pub const E2E_DEV_FRACTION: f64 = 0.1;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The bundled corpus, truncated to its first `n` documents.
pub fn topics(n: usize) -> (Vec<Document>, LabelMap) {
    let (mut docs, labels) = corpus::load_corpus(&fixture("topics.tsv"), Format::Tsv).expect("bundled corpus");
    docs.truncate(n);
    (docs, labels)
}

pub fn config(name: &str) -> PipelineConfig {
    PipelineConfig::load(&fixture(name)).expect("bundled config")
}

/// Train / Dev partition of the noise fixture for one seed.
pub fn noise_fixture(seed: u64) -> (Vec<Document>, Vec<Document>, usize) {
    let (docs, labels) = topics(NOISE_DOCS);
    let (train, dev) = corpus::holdout(&docs, NOISE_DEV_FRACTION, seed).expect("holdout");
    (train, dev, labels.len())
}

/// Labeled / unlabeled / Dev / test split of the end-to-end fixture.
pub fn e2e_split(seed: u64) -> CorpusSplit {
    let (docs, _) = topics(usize::MAX);
    let (rest, test) = corpus::holdout(&docs, E2E_TEST_FRACTION, seed).expect("holdout");
    corpus::split(&rest, E2E_LABELED_FRACTION, E2E_DEV_FRACTION, seed)
        .expect("split")
        .with_test(test)
}
