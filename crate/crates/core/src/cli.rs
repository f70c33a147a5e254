//! The `rnt` command line: `synth`, `prepare`, `run`, `eval` and `rank`.
//!
//! Every command writes a `manifest.json` next to its outputs. Run manifests
//! are written with `"status": "running"` before any work starts and
//! rewritten as `"complete"` at the end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{self, CorpusSplit, DocId, Document, Format, LabelMap};
use crate::dst;
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::model::Classifier;
use crate::pipeline::{self, Evidence, PipelineConfig, RunArtifacts, Variant};
use crate::probes::{self, PerturbSettings, HISTOGRAM_BINS};
use crate::seed;
use crate::synth::{self, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

const LABELS_FILE: &str = "labels.json";
const HIDDEN_GOLD_FILE: &str = "hidden_gold.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const SPLIT_FILES: [(&str, &str); 4] = [
    ("labeled", "labeled.jsonl"),
    ("unlabeled", "unlabeled.jsonl"),
    ("dev", "dev.jsonl"),
    ("test", "test.jsonl"),
];

#[derive(Debug, Parser)]
#[command(name = "rnt", version, about = "Self-training with evidential filtering and negative training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic topic corpus as TSV (`text<TAB>label`).
    Synth(SynthArgs),
    /// Split a labeled corpus into labeled / unlabeled / dev / test files.
    Prepare(PrepareArgs),
    /// Train one variant for one or more seeds.
    Run(RunArgs),
    /// Compute report files for a finished run.
    Eval(EvalArgs),
    /// Rank a pseudo-labeled file by evidential support.
    Rank(RankArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_docs: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Csv,
    Jsonl,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => Format::Tsv,
            FormatArg::Csv => Format::Csv,
            FormatArg::Jsonl => Format::Jsonl,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the input's extension.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long)]
    pub out: PathBuf,
    /// Separate test file in the same format; otherwise `--test-fraction`
    /// of the input is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub labeled_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    /// Symmetric label noise injected into the labeled partition.
    #[arg(long, default_value_t = 0.0)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Comma-separated root seeds; one run directory per seed.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pt_epochs: Option<usize>,
    #[arg(long)]
    pub nt_epochs: Option<usize>,
    #[arg(long)]
    pub selnt_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Metrics,
    Curve,
    Hist,
    Denoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Dev,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A run directory (one seed) written by `run`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub probes: Vec<Probe>,
    /// Split scored by the `metrics` probe.
    #[arg(long, value_enum, default_value = "test")]
    pub on: SplitName,
    #[arg(long, default_value_t = PerturbSettings::default().instance_rate)]
    pub instance_rate: f64,
    #[arg(long, default_value_t = PerturbSettings::default().word_rate)]
    pub word_rate: f64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Split directory whose labeled partition supplies the evidence.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL documents; a `pseudo_label` field overrides the model's argmax.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command_line: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &command_line) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::UnrepresentedClass { .. } => EXIT_USAGE,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

pub fn execute(command: Command, command_line: &[String]) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Prepare(a) => cmd_prepare(&a, command_line),
        Command::Run(a) => cmd_run(&a, command_line),
        Command::Eval(a) => cmd_eval(&a, command_line),
        Command::Rank(a) => cmd_rank(&a, command_line),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&read_to_string(path)?)?)
}

fn tool_versions() -> Value {
    json!({ "rnt": env!("CARGO_PKG_VERSION"), "checkpoint": 1 })
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<SynthConfig>(&read_to_string(p)?)
            .map_err(|e| Error::config("synth", e.message().to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.num_docs {
        cfg.num_docs = n;
    }
    if let Some(k) = a.num_classes {
        cfg.num_classes = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    write_synth_tsv(&a.out, &cfg)
}

/// Writes a synthetic corpus as `text<TAB>label` with labels `topic_<c>`.
pub fn write_synth_tsv(path: &Path, cfg: &SynthConfig) -> Result<()> {
    let docs = synth::generate(cfg)?;
    let mut w = BufWriter::new(File::create(path)?);
    for d in &docs {
        writeln!(w, "{}\ttopic_{}", d.text, d.gold_label.expect("synthetic documents are labeled"))?;
    }
    w.flush()?;
    Ok(())
}

fn resolve_format(path: &Path, format: Option<FormatArg>) -> Result<Format> {
    match format {
        Some(f) => Ok(f.into()),
        None => Format::from_path(path).ok_or_else(|| {
            Error::invalid(format!("cannot infer the format of {}; pass --format", path.display()))
        }),
    }
}

fn cmd_prepare(a: &PrepareArgs, command_line: &[String]) -> Result<()> {
    let format = resolve_format(&a.input, a.format)?;
    let (docs, mut labels) = corpus::load_corpus(&a.input, format)?;
    let (rest, test) = match &a.test {
        Some(test_path) => {
            if a.test_fraction != 0.0 {
                return Err(Error::invalid("--test and --test-fraction are mutually exclusive"));
            }
            let mut test = corpus::load_corpus_with(test_path, resolve_format(test_path, a.format)?, &mut labels, false)?;
            let offset = docs.len() as DocId;
            for d in &mut test {
                d.id += offset;
            }
            (docs, test)
        }
        None => corpus::holdout(&docs, a.test_fraction, seed::derive(a.seed, "prepare/holdout"))?,
    };
    let mut split = corpus::split(&rest, a.labeled_fraction, a.dev_fraction, seed::derive(a.seed, "prepare/split"))?
        .with_test(test);
    if labels.len() > split.num_classes {
        split.num_classes = labels.len();
    }
    let mut noise = json!({ "rate": a.noise_rate, "flipped": 0, "flipped_ids": [] });
    if a.noise_rate > 0.0 {
        let (noisy, report) = corpus::inject_symmetric_noise(
            &split.labeled,
            a.noise_rate,
            split.num_classes,
            seed::derive(a.seed, "prepare/noise"),
        )?;
        split.labeled = noisy;
        noise = json!({ "rate": a.noise_rate, "flipped": report.flipped, "flipped_ids": report.flipped_ids });
    }
    split.validate()?;

    fs::create_dir_all(&a.out)?;
    let mut outputs = BTreeMap::new();
    labels.save(&a.out.join(LABELS_FILE))?;
    for (part, file) in SPLIT_FILES {
        let docs = match part {
            "labeled" => &split.labeled,
            "unlabeled" => &split.unlabeled,
            "dev" => &split.dev,
            _ => &split.test,
        };
        corpus::write_documents(&a.out.join(file), docs, &labels)?;
    }
    write_hidden_gold(&a.out.join(HIDDEN_GOLD_FILE), &split.hidden_gold, &labels)?;
    for file in [LABELS_FILE, HIDDEN_GOLD_FILE].into_iter().chain(SPLIT_FILES.map(|(_, f)| f)) {
        outputs.insert(file, sha256_file(&a.out.join(file))?);
    }
    let counts: BTreeMap<&str, usize> = split.partitions().iter().map(|(p, d)| (*p, d.len())).collect();
    let mut inputs = BTreeMap::new();
    inputs.insert(a.input.display().to_string(), sha256_file(&a.input)?);
    if let Some(t) = &a.test {
        inputs.insert(t.display().to_string(), sha256_file(t)?);
    }
    let manifest = json!({
        "kind": "prepare",
        "status": "complete",
        "versions": tool_versions(),
        "created_unix": unix_now(),
        "command": command_line,
        "options": {
            "format": format!("{format:?}").to_lowercase(),
            "labeled_fraction": a.labeled_fraction,
            "dev_fraction": a.dev_fraction,
            "test_fraction": a.test_fraction,
            "noise_rate": a.noise_rate,
        },
        "seeds": {
            "root": a.seed,
            "holdout": seed::derive(a.seed, "prepare/holdout"),
            "split": seed::derive(a.seed, "prepare/split"),
            "noise": seed::derive(a.seed, "prepare/noise"),
        },
        "inputs": inputs,
        "num_classes": split.num_classes,
        "labels": labels.names(),
        "counts": counts,
        "noise": noise,
        "outputs": outputs,
    });
    write_json(&a.out.join(MANIFEST_FILE), &manifest)?;
    eprintln!(
        "prepared {}: labeled {} unlabeled {} dev {} test {} (flipped {})",
        a.out.display(),
        split.labeled.len(),
        split.unlabeled.len(),
        split.dev.len(),
        split.test.len(),
        manifest["noise"]["flipped"]
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GoldRecord {
    id: DocId,
    label: String,
}

fn write_hidden_gold(path: &Path, gold: &BTreeMap<DocId, usize>, labels: &LabelMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (&id, &c) in gold {
        let label = labels.name(c).unwrap_or_default().to_string();
        serde_json::to_writer(&mut w, &GoldRecord { id, label })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_hidden_gold(path: &Path, labels: &LabelMap) -> Result<BTreeMap<DocId, usize>> {
    let reader = BufReader::new(File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            source_name: path.display().to_string(),
            record: i + 1,
            message,
        };
        let rec: GoldRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let c = labels
            .get(&rec.label)
            .ok_or_else(|| malformed(format!("unknown label `{}`", rec.label)))?;
        out.insert(rec.id, c);
    }
    Ok(out)
}

/// Loads a directory written by `prepare`.
pub fn load_split(dir: &Path) -> Result<(CorpusSplit, LabelMap)> {
    let labels = LabelMap::load(&dir.join(LABELS_FILE))?;
    let mut parts: BTreeMap<&str, Vec<Document>> = BTreeMap::new();
    for (part, file) in SPLIT_FILES {
        let path = dir.join(file);
        require(&path)?;
        parts.insert(part, corpus::read_documents(&path, &labels)?);
    }
    let mut take = |p: &str| parts.remove(p).unwrap_or_default();
    let split = CorpusSplit {
        labeled: take("labeled"),
        unlabeled: take("unlabeled"),
        dev: take("dev"),
        test: take("test"),
        num_classes: labels.len(),
        hidden_gold: read_hidden_gold(&dir.join(HIDDEN_GOLD_FILE), &labels)?,
    };
    split.validate()?;
    Ok((split, labels))
}

fn split_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for file in [LABELS_FILE, HIDDEN_GOLD_FILE].into_iter().chain(SPLIT_FILES.map(|(_, f)| f)) {
        out.insert(file.to_string(), sha256_file(&dir.join(file))?);
    }
    Ok(out)
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

/// Seeds of every stage, derived from the root seed.
pub fn stage_seeds(root: u64) -> BTreeMap<&'static str, u64> {
    ["pt/init", "pt", "nt/init", "nt"]
        .into_iter()
        .map(|s| (s, seed::derive(root, s)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResults {
    pub seed: u64,
    pub variant: Variant,
    pub theta: f64,
    pub selected: usize,
    pub pool: usize,
    pub pt_dev: Metrics,
    pub final_dev: Metrics,
    pub pt_test: Option<Metrics>,
    pub final_test: Option<Metrics>,
    pub pool_pseudo_accuracy: Option<f64>,
    pub selected_pseudo_accuracy: Option<f64>,
}

fn cmd_run(a: &RunArgs, command_line: &[String]) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(e) = a.pt_epochs {
        cfg.pt_epochs = e;
    }
    if let Some(e) = a.nt_epochs {
        cfg.nt_epochs = e;
    }
    if let Some(e) = a.selnt_epochs {
        cfg.selnt_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let seeds: Vec<u64> = match (a.seed, a.seeds.is_empty()) {
        (Some(s), _) => vec![s],
        (None, true) => vec![cfg.seed],
        (None, false) => a.seeds.clone(),
    };
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(Error::invalid("--seeds contains duplicates"));
    }
    cfg.validate()?;
    let (split, labels) = load_split(&a.split)?;
    let hashes = split_hashes(&a.split)?;
    fs::create_dir_all(&a.out)?;

    let results: Vec<Result<RunResults>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&s| {
                let mut cfg = cfg.clone();
                cfg.seed = s;
                let dir = a.out.join(format!("seed-{s}"));
                let (split, labels, hashes) = (&split, &labels, &hashes);
                scope.spawn(move || run_one(&dir, &a.split, split, labels, hashes, &cfg, command_line))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("run worker panicked"))))
            .collect()
    });
    let results: Vec<RunResults> = results.into_iter().collect::<Result<_>>()?;
    let summary = summarize(&results);
    write_json(&a.out.join("summary.json"), &summary)?;
    for r in &results {
        eprintln!(
            "seed {}: {} theta {:.2} selected {}/{} dev macro-F1 {:.4}{}",
            r.seed,
            r.variant,
            r.theta,
            r.selected,
            r.pool,
            r.final_dev.macro_f1,
            r.final_test
                .map(|m| format!(" test macro-F1 {:.4}", m.macro_f1))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn summarize(results: &[RunResults]) -> Value {
    let stat = |xs: Vec<f64>| {
        if xs.is_empty() {
            return Value::Null;
        }
        let (mean, std) = eval::mean_std(&xs);
        json!({ "mean": mean, "std": std, "n": xs.len() })
    };
    let field = |get: &dyn Fn(&RunResults) -> Option<f64>| stat(results.iter().filter_map(get).collect());
    json!({
        "seeds": results.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "variant": results.first().map(|r| r.variant.to_string()),
        "final_test_accuracy": field(&|r| r.final_test.map(|m| m.accuracy)),
        "final_test_macro_f1": field(&|r| r.final_test.map(|m| m.macro_f1)),
        "pt_test_accuracy": field(&|r| r.pt_test.map(|m| m.accuracy)),
        "pt_test_macro_f1": field(&|r| r.pt_test.map(|m| m.macro_f1)),
        "final_dev_macro_f1": field(&|r| Some(r.final_dev.macro_f1)),
        "theta": field(&|r| Some(r.theta)),
        "runs": results,
    })
}

fn label_namer(labels: &LabelMap) -> impl Fn(usize) -> String + '_ {
    move |c| labels.name(c).map(str::to_string).unwrap_or_else(|| c.to_string())
}

fn run_one(
    dir: &Path,
    split_dir: &Path,
    split: &CorpusSplit,
    labels: &LabelMap,
    hashes: &BTreeMap<String, String>,
    cfg: &PipelineConfig,
    command_line: &[String],
) -> Result<RunResults> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut manifest = json!({
        "kind": "run",
        "status": "running",
        "versions": tool_versions(),
        "started_unix": unix_now(),
        "command": command_line,
        "config": cfg,
        "seeds": { "root": cfg.seed, "stages": stage_seeds(cfg.seed) },
        "vectorizer": cfg.vectorizer.describe(),
        "split_dir": split_dir.display().to_string(),
        "data": hashes,
        "outputs": {},
    });
    let manifest_path = dir.join(MANIFEST_FILE);
    write_json(&manifest_path, &manifest)?;

    let artifacts = match pipeline::run_variant(split, cfg) {
        Ok(a) => a,
        Err(e) => {
            manifest["status"] = json!("failed");
            manifest["error"] = json!(e.to_string());
            manifest["finished_unix"] = json!(unix_now());
            write_json(&manifest_path, &manifest)?;
            return Err(e);
        }
    };
    let outputs = write_run_outputs(dir, split, labels, cfg, &artifacts)?;
    let results = run_results(split, cfg, &artifacts)?;
    write_json(&dir.join("results.json"), &results)?;

    let mut hashed = BTreeMap::new();
    for file in outputs.iter().map(String::as_str).chain(["config.toml", "results.json"]) {
        hashed.insert(file.to_string(), sha256_file(&dir.join(file))?);
    }
    manifest["status"] = json!("complete");
    manifest["finished_unix"] = json!(unix_now());
    manifest["outputs"] = json!(hashed);
    manifest["theta"] = json!(artifacts.theta);
    write_json(&manifest_path, &manifest)?;
    Ok(results)
}

fn write_run_outputs(
    dir: &Path,
    split: &CorpusSplit,
    labels: &LabelMap,
    cfg: &PipelineConfig,
    a: &RunArtifacts,
) -> Result<Vec<String>> {
    let mut files = vec!["metrics.jsonl", "pseudo_labels.jsonl", "cutoff.json", "pt.ckpt", "final.ckpt"];
    pipeline::write_metrics_jsonl(&dir.join("metrics.jsonl"), &a.metrics_log)?;
    let pseudo: Vec<Document> = split
        .unlabeled
        .iter()
        .map(|d| Document {
            pseudo_label: a.pseudo_labels.get(&d.id).copied(),
            ..d.clone()
        })
        .collect();
    corpus::write_documents(&dir.join("pseudo_labels.jsonl"), &pseudo, labels)?;
    if let Some(ranked) = &a.ranked {
        ranked.write_csv(&dir.join("ranked.csv"), label_namer(labels))?;
        files.push("ranked.csv");
    }
    if let Some(ranked) = &a.dev_ranked {
        ranked.write_csv(&dir.join("dev_ranked.csv"), label_namer(labels))?;
        files.push("dev_ranked.csv");
    }
    let cutoff = json!({
        "variant": a.variant,
        "theta": a.theta,
        "lambda": a.cutoff.as_ref().map(|c| c.lambda),
        "prefix": a.cutoff.as_ref().map(|c| c.prefix),
        "raw_theta": a.cutoff.as_ref().map(|c| c.theta),
        "proportion_accuracies": a.cutoff.as_ref().map(|c| c.proportion_accuracies.clone()),
        "pool": split.unlabeled.len(),
        "selected": a.selected_ids.len(),
        "selected_ids": a.selected_ids,
    });
    write_json(&dir.join("cutoff.json"), &cutoff)?;
    let training = |stage: &str, epoch: usize| {
        json!({ "stage": stage, "best_epoch": epoch, "config": cfg, "seed": cfg.seed })
    };
    a.pt_model.save(&dir.join("pt.ckpt"), &training("pt", a.pt.best_epoch))?;
    a.final_model.save(&dir.join("final.ckpt"), &training("nt", a.nt.best_epoch))?;
    Ok(files.into_iter().map(str::to_string).collect())
}

fn run_results(split: &CorpusSplit, cfg: &PipelineConfig, a: &RunArtifacts) -> Result<RunResults> {
    let par = cfg.parallelism;
    let dev = pipeline::encode_eval(&split.dev, &cfg.vectorizer, par)?;
    let test = if split.test.is_empty() {
        None
    } else {
        Some(pipeline::encode_eval(&split.test, &cfg.vectorizer, par)?)
    };
    let gold = &split.hidden_gold;
    let has_gold = !gold.is_empty();
    Ok(RunResults {
        seed: cfg.seed,
        variant: a.variant,
        theta: a.theta,
        selected: a.selected_ids.len(),
        pool: split.unlabeled.len(),
        pt_dev: pipeline::evaluate(&a.pt_model, &dev, par),
        final_dev: pipeline::evaluate(&a.final_model, &dev, par),
        pt_test: test.as_ref().map(|t| pipeline::evaluate(&a.pt_model, t, par)),
        final_test: test.as_ref().map(|t| pipeline::evaluate(&a.final_model, t, par)),
        pool_pseudo_accuracy: has_gold
            .then(|| pipeline::pseudo_label_accuracy(a.pseudo_labels.keys().copied(), &a.pseudo_labels, gold))
            .flatten(),
        selected_pseudo_accuracy: has_gold
            .then(|| pipeline::pseudo_label_accuracy(a.selected_ids.iter().copied(), &a.pseudo_labels, gold))
            .flatten(),
    })
}

/// What `eval` needs from a run directory.
struct RunDir {
    cfg: PipelineConfig,
    split: CorpusSplit,
    pt_model: Classifier,
    final_model: Classifier,
}

fn open_run(dir: &Path) -> Result<RunDir> {
    let manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest["status"] != "complete" {
        return Err(Error::invalid(format!("run in {} did not complete", dir.display())));
    }
    let cfg = PipelineConfig::load(&dir.join("config.toml"))?;
    let split_dir = manifest["split_dir"]
        .as_str()
        .map(PathBuf::from)
        .ok_or_else(|| Error::invalid("run manifest has no split_dir"))?;
    let (split, _) = load_split(&split_dir)?;
    Ok(RunDir {
        pt_model: Classifier::load(&dir.join("pt.ckpt"))?,
        final_model: Classifier::load(&dir.join("final.ckpt"))?,
        cfg,
        split,
    })
}

fn cmd_eval(a: &EvalArgs, command_line: &[String]) -> Result<()> {
    let run = open_run(&a.run)?;
    let par = run.cfg.parallelism;
    let mut probes = a.probes.clone();
    probes.sort_unstable();
    probes.dedup();
    let mut reports = BTreeMap::new();
    for probe in probes {
        let file = match probe {
            Probe::Metrics => {
                let (name, docs) = match a.on {
                    SplitName::Dev => ("dev", &run.split.dev),
                    SplitName::Test => ("test", &run.split.test),
                };
                if docs.is_empty() {
                    return Err(Error::Empty(format!("{name} partition")));
                }
                let items = pipeline::encode_eval(docs, &run.cfg.vectorizer, par)?;
                let report = json!({
                    "split": name,
                    "n": items.len(),
                    "pt": pipeline::evaluate(&run.pt_model, &items, par),
                    "final": pipeline::evaluate(&run.final_model, &items, par),
                });
                write_json(&a.run.join("eval_metrics.json"), &report)?;
                "eval_metrics.json"
            }
            Probe::Curve => {
                let curve = probes::dev_ranking_curve(&run.pt_model, &run.split, &run.cfg)?;
                curve.write_csv(&a.run.join("curve.csv"))?;
                "curve.csv"
            }
            Probe::Hist => {
                let items = pipeline::encode_train(&run.split.labeled, &run.cfg.vectorizer, par)?;
                let hist = |m: &Classifier| {
                    eval::confidence_histogram(&pipeline::training_confidences(m, &items, par), HISTOGRAM_BINS)
                };
                let report = json!({
                    "partition": "labeled",
                    "pt": hist(&run.pt_model)?,
                    "final": hist(&run.final_model)?,
                });
                write_json(&a.run.join("hist.json"), &report)?;
                "hist.json"
            }
            Probe::Denoise => {
                let settings = PerturbSettings {
                    instance_rate: a.instance_rate,
                    word_rate: a.word_rate,
                };
                let report = probes::denoise_probe(&run.pt_model, &run.split, settings, &run.cfg)?;
                write_json(
                    &a.run.join("denoise.json"),
                    &json!({ "settings": settings, "model": "pt", "report": report }),
                )?;
                "denoise.json"
            }
        };
        reports.insert(probe, file);
    }
    let manifest = json!({
        "kind": "eval",
        "versions": tool_versions(),
        "created_unix": unix_now(),
        "command": command_line,
        "run": a.run.display().to_string(),
        "reports": reports,
    });
    write_json(&a.run.join("eval_manifest.json"), &manifest)?;
    for (probe, file) in &reports {
        eprintln!("{probe:?}: {}", a.run.join(file).display());
    }
    Ok(())
}

fn cmd_rank(a: &RankArgs, command_line: &[String]) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let (split, labels) = load_split(&a.split)?;
    let model = Classifier::load(&a.model)?;
    if model.num_classes() != split.num_classes {
        return Err(Error::invalid(format!(
            "model has {} classes, split has {}",
            model.num_classes(),
            split.num_classes
        )));
    }
    require(&a.input)?;
    let docs = corpus::read_documents(&a.input, &labels)?;
    if docs.is_empty() {
        return Err(Error::Empty(a.input.display().to_string()));
    }
    let par = cfg.parallelism;
    let labeled = pipeline::encode_train(&split.labeled, &cfg.vectorizer, par)?;
    let ev = Evidence::build(&model, &labeled, cfg.n_prototypes, par)?;
    let xs = par.map(&docs, |d| cfg.vectorizer.encode(&d.text));
    let pairs: Vec<(DocId, &_)> = docs.iter().map(|d| d.id).zip(&xs).collect();
    let mut candidates = ev.candidates(&model, &pairs, par);
    for (c, d) in candidates.iter_mut().zip(&docs) {
        if let Some(p) = d.pseudo_label {
            c.pseudo_label = p;
        }
    }
    let ranked = dst::rank(&candidates, &ev.index, cfg.d_f, par)?;
    ranked.write_csv(&a.out, label_namer(&labels))?;
    let manifest = json!({
        "kind": "rank",
        "versions": tool_versions(),
        "created_unix": unix_now(),
        "command": command_line,
        "config": cfg,
        "inputs": {
            "split": split_hashes(&a.split)?,
            "model": sha256_file(&a.model)?,
            "documents": sha256_file(&a.input)?,
        },
        "output": { "path": a.out.display().to_string(), "sha256": sha256_file(&a.out)? },
        "count": ranked.len(),
    });
    let mut manifest_path = a.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    write_json(Path::new(&manifest_path), &manifest)?;
    eprintln!("ranked {} documents into {}", ranked.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("lr", "bad")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), EXIT_MISSING);
        let div = Error::Divergence {
            phase: "pt".into(),
            epoch: 1,
            detail: "nan".into(),
        };
        assert_eq!(exit_code(&div), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&Error::Empty("x".into())), EXIT_FAILURE);
    }

    #[test]
    fn sha256_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_from(["rnt", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_from(["rnt", "eval", "--run", "x", "--probes", "bogus"]), EXIT_USAGE);
        assert_eq!(run_from(["rnt", "--help"]), EXIT_OK);
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let s = stage_seeds(7);
        let mut v: Vec<u64> = s.values().copied().collect();
        v.dedup();
        assert_eq!(v.len(), 4);
    }
}
