//! Documents, ingestion, deterministic splits and the two noise injectors
//! (symmetric label flips and character-level text perturbation).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type DocId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: DocId,
    pub text: String,
    pub gold_label: Option<usize>,
    pub pseudo_label: Option<usize>,
    /// Set only by the noise injectors.
    pub is_noisy: Option<bool>,
}

impl Document {
    pub fn new(id: DocId, text: impl Into<String>, gold_label: Option<usize>) -> Self {
        Self {
            id,
            text: text.into(),
            gold_label,
            pseudo_label: None,
            is_noisy: None,
        }
    }

    pub fn noisy(&self) -> bool {
        self.is_noisy.unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Csv,
    Jsonl,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" | "txt" => Some(Format::Tsv),
            "csv" => Some(Format::Csv),
            "jsonl" | "json" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

/// Dense class vocabulary in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelMap {
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = LabelMap::default();
        for name in names {
            map.intern(&name.into());
        }
        map
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// JSON object `class-name -> index`.
    pub fn to_json(&self) -> serde_json::Value {
        let obj: serde_json::Map<String, serde_json::Value> = self
            .index
            .iter()
            .map(|(k, &v)| (k.clone(), serde_json::Value::from(v)))
            .collect();
        serde_json::Value::Object(obj)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::invalid("label map must be a JSON object"))?;
        let mut pairs: Vec<(usize, String)> = Vec::with_capacity(obj.len());
        for (name, idx) in obj {
            let idx = idx
                .as_u64()
                .ok_or_else(|| Error::invalid(format!("label map entry `{name}` is not an index")))?;
            pairs.push((idx as usize, name.clone()));
        }
        pairs.sort();
        for (expected, (idx, name)) in pairs.iter().enumerate() {
            if *idx != expected {
                return Err(Error::invalid(format!(
                    "label map is not dense: `{name}` has index {idx}, expected {expected}"
                )));
            }
        }
        Ok(LabelMap::from_names(pairs.into_iter().map(|(_, n)| n)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.to_json())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = open(path)?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))?;
        Self::from_json(&value)
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Reads a labeled (or partially labeled) corpus. Ids are assigned
/// sequentially from 0 and labels are interned in first-seen order.
pub fn load_corpus(path: &Path, format: Format) -> Result<(Vec<Document>, LabelMap)> {
    let mut labels = LabelMap::default();
    let docs = load_corpus_with(path, format, &mut labels, true)?;
    Ok((docs, labels))
}

/// Like [`load_corpus`] but resolves labels against an existing map. Unknown
/// labels are an error unless `extend` is set.
pub fn load_corpus_with(
    path: &Path,
    format: Format,
    labels: &mut LabelMap,
    extend: bool,
) -> Result<Vec<Document>> {
    let name = path.display().to_string();
    let raw = match format {
        Format::Tsv => read_tsv(path, &name)?,
        Format::Csv => read_csv(path, &name)?,
        Format::Jsonl => read_jsonl_raw(path, &name)?
            .into_iter()
            .map(|(rec, r)| (rec.text, rec.label, r))
            .collect(),
    };
    if raw.is_empty() {
        return Err(Error::Empty(name));
    }
    raw.into_iter()
        .enumerate()
        .map(|(i, (text, label, record))| {
            let gold_label = match label {
                None => None,
                Some(l) if extend => Some(labels.intern(&l)),
                Some(l) => Some(labels.get(&l).ok_or_else(|| Error::Malformed {
                    source_name: name.clone(),
                    record,
                    message: format!("unknown label `{l}`"),
                })?),
            };
            Ok(Document::new(i as DocId, text, gold_label))
        })
        .collect()
}

type RawRecord = (String, Option<String>, usize);

fn read_tsv(path: &Path, name: &str) -> Result<Vec<RawRecord>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: &str| Error::Malformed {
            source_name: name.to_string(),
            record: i + 1,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let text = fields.next().unwrap_or_default();
        let label = fields.next();
        if fields.next().is_some() {
            return Err(malformed("expected `text<TAB>label`, found extra fields"));
        }
        if text.trim().is_empty() {
            return Err(malformed("empty text field"));
        }
        let label = label.map(str::trim).filter(|l| !l.is_empty());
        out.push((text.to_string(), label.map(str::to_string), i + 1));
    }
    Ok(out)
}

fn read_csv(path: &Path, name: &str) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?);
    let headers = reader.headers()?.clone();
    let text_col = headers
        .iter()
        .position(|h| h.trim() == "text")
        .ok_or_else(|| Error::Malformed {
            source_name: name.to_string(),
            record: 1,
            message: "header has no `text` column".into(),
        })?;
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let text = row.get(text_col).ok_or_else(|| Error::Malformed {
            source_name: name.to_string(),
            record: line,
            message: "missing text field".into(),
        })?;
        if text.trim().is_empty() {
            return Err(Error::Malformed {
                source_name: name.to_string(),
                record: line,
                message: "empty text field".into(),
            });
        }
        let label = label_col
            .and_then(|c| row.get(c))
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string);
        out.push((text.to_string(), label, line));
    }
    Ok(out)
}

/// One JSONL line, shared by the input and the split-file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<DocId>,
    text: String,
    #[serde(default, deserialize_with = "label_value")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pseudo_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    is_noisy: Option<bool>,
}

fn label_value<'de, D>(de: D) -> std::result::Result<Option<String>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error as _;
    let v = Option::<serde_json::Value>::deserialize(de)?;
    match v {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s)),
        Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => Err(D::Error::custom(format!("label must be a string, got {other}"))),
    }
}

fn read_jsonl_raw(path: &Path, name: &str) -> Result<Vec<(JsonRecord, usize)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            source_name: name.to_string(),
            record: i + 1,
            message: e.to_string(),
        })?;
        out.push((rec, i + 1));
    }
    Ok(out)
}

/// Writes documents in the split-file schema:
/// `{"id", "text", "label", "pseudo_label"?, "is_noisy"?}` with class names.
pub fn write_documents(path: &Path, docs: &[Document], labels: &LabelMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in docs {
        let name = |c: usize| labels.name(c).map(str::to_string);
        let rec = JsonRecord {
            id: Some(doc.id),
            text: doc.text.clone(),
            label: doc.gold_label.and_then(name),
            pseudo_label: doc.pseudo_label.and_then(name),
            is_noisy: doc.is_noisy,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a split file written by [`write_documents`].
pub fn read_documents(path: &Path, labels: &LabelMap) -> Result<Vec<Document>> {
    let name = path.display().to_string();
    let lookup = |l: String, record: usize| {
        labels.get(&l).ok_or_else(|| Error::Malformed {
            source_name: name.clone(),
            record,
            message: format!("unknown label `{l}`"),
        })
    };
    read_jsonl_raw(path, &name)?
        .into_iter()
        .enumerate()
        .map(|(i, (rec, record))| {
            Ok(Document {
                id: rec.id.unwrap_or(i as DocId),
                text: rec.text,
                gold_label: rec.label.map(|l| lookup(l, record)).transpose()?,
                pseudo_label: rec.pseudo_label.map(|l| lookup(l, record)).transpose()?,
                is_noisy: rec.is_noisy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub labeled: Vec<Document>,
    /// Training-visible unlabeled pool; `gold_label` is always `None` here.
    pub unlabeled: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub num_classes: usize,
    /// Gold labels of the unlabeled pool, read only by evaluation code.
    pub hidden_gold: BTreeMap<DocId, usize>,
}

impl CorpusSplit {
    /// Checks pairwise id-disjointness and label ranges.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a split needs at least two classes"));
        }
        if self.labeled.is_empty() {
            return Err(Error::invalid("labeled partition is empty"));
        }
        let mut seen = BTreeSet::new();
        for (part, docs) in self.partitions() {
            for d in docs {
                if !seen.insert(d.id) {
                    return Err(Error::invalid(format!("document {} appears twice (in {part})", d.id)));
                }
                let needs_gold = part != "unlabeled";
                match d.gold_label {
                    Some(l) if l >= self.num_classes => {
                        return Err(Error::invalid(format!("document {} has label {l} >= K", d.id)))
                    }
                    None if needs_gold => {
                        return Err(Error::invalid(format!("document {} in {part} lacks a label", d.id)))
                    }
                    Some(_) if !needs_gold => {
                        return Err(Error::invalid(format!("unlabeled document {} exposes a label", d.id)))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn partitions(&self) -> [(&'static str, &[Document]); 4] {
        [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }

    pub fn with_test(mut self, test: Vec<Document>) -> Self {
        self.test = test;
        self
    }
}

fn num_classes_of(docs: &[Document]) -> Result<usize> {
    let mut k = 0;
    for d in docs {
        let l = d
            .gold_label
            .ok_or_else(|| Error::invalid(format!("document {} has no gold label", d.id)))?;
        k = k.max(l + 1);
    }
    Ok(k)
}

/// Splits a fully labeled corpus into labeled / dev / unlabeled partitions.
/// The labeled portion is class-stratified (largest-remainder quotas); dev is
/// a uniform draw from the rest. `test` is left empty: test data comes from a
/// separate file or from [`holdout`].
pub fn split(
    docs: &[Document],
    labeled_fraction: f64,
    dev_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::invalid("labeled_fraction must lie in (0, 1)"));
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::invalid("dev_fraction must lie in (0, 1)"));
    }
    if labeled_fraction + dev_fraction >= 1.0 {
        return Err(Error::invalid("labeled_fraction + dev_fraction must be < 1"));
    }
    if docs.is_empty() {
        return Err(Error::Empty("split input".into()));
    }
    let k = num_classes_of(docs)?.max(2);
    let n = docs.len();
    let n_labeled = (labeled_fraction * n as f64).round() as usize;
    let n_dev = (dev_fraction * n as f64).round() as usize;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, d) in docs.iter().enumerate() {
        by_class[d.gold_label.expect("checked above")].push(i);
    }
    let quotas = largest_remainder(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), n_labeled);
    if let Some(class) = quotas.iter().position(|&q| q == 0) {
        return Err(Error::UnrepresentedClass { class });
    }

    let mut rng = seed::stage_rng(seed, "split");
    let mut taken = vec![false; n];
    let mut labeled = Vec::with_capacity(n_labeled);
    for (members, &quota) in by_class.iter_mut().zip(&quotas) {
        members.shuffle(&mut rng);
        for &i in &members[..quota] {
            taken[i] = true;
            labeled.push(docs[i].clone());
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    let n_dev = n_dev.min(rest.len());
    let mut dev: Vec<Document> = rest[..n_dev].iter().map(|&i| docs[i].clone()).collect();
    let mut hidden_gold = BTreeMap::new();
    let mut unlabeled: Vec<Document> = rest[n_dev..]
        .iter()
        .map(|&i| {
            let mut d = docs[i].clone();
            if let Some(g) = d.gold_label.take() {
                hidden_gold.insert(d.id, g);
            }
            d
        })
        .collect();
    for part in [&mut labeled, &mut dev, &mut unlabeled] {
        part.sort_by_key(|d| d.id);
    }
    let split = CorpusSplit {
        labeled,
        unlabeled,
        dev,
        test: Vec::new(),
        num_classes: k,
        hidden_gold,
    };
    split.validate()?;
    Ok(split)
}

/// Largest-remainder apportionment of `total` across groups of the given
/// sizes; ties on the remainder go to the lower group index.
fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut remainders: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| (s * total % n, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = quotas.iter().sum();
    for &(_, i) in remainders.iter().take(total - assigned) {
        quotas[i] += 1;
    }
    quotas
}

/// Removes a uniformly drawn `fraction` of `docs` as a test partition.
/// Returns `(rest, test)`, both sorted by id.
pub fn holdout(docs: &[Document], fraction: f64, seed: u64) -> Result<(Vec<Document>, Vec<Document>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("test fraction must lie in [0, 1)"));
    }
    let n_test = (fraction * docs.len() as f64).round() as usize;
    let mut rng = seed::stage_rng(seed, "holdout");
    let chosen: BTreeSet<usize> = index::sample(&mut rng, docs.len(), n_test).into_iter().collect();
    let (test, rest): (Vec<_>, Vec<_>) = docs
        .iter()
        .enumerate()
        .partition(|(i, _)| chosen.contains(i));
    let strip = |v: Vec<(usize, &Document)>| v.into_iter().map(|(_, d)| d.clone()).collect::<Vec<_>>();
    Ok((strip(rest), strip(test)))
}

/// Outcome of [`inject_symmetric_noise`].
#[derive(Debug, Clone)]
pub struct NoiseReport {
    pub flipped: usize,
    pub flipped_ids: Vec<DocId>,
}

/// Replaces the labels of exactly `round(rate * n)` uniformly chosen
/// documents by a uniform draw over the other `K - 1` classes. Every
/// document comes back with `is_noisy` set.
pub fn inject_symmetric_noise(
    docs: &[Document],
    rate: f64,
    k: usize,
    seed: u64,
) -> Result<(Vec<Document>, NoiseReport)> {
    if k < 2 {
        return Err(Error::invalid("symmetric noise needs K >= 2"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("noise rate must lie in [0, 1]"));
    }
    for d in docs {
        match d.gold_label {
            None => return Err(Error::invalid(format!("document {} has no gold label", d.id))),
            Some(l) if l >= k => return Err(Error::invalid(format!("document {} has label {l} >= K", d.id))),
            _ => {}
        }
    }
    let count = (rate * docs.len() as f64).round() as usize;
    let mut rng = seed::stage_rng(seed, "symmetric-noise");
    let mut selected: Vec<usize> = index::sample(&mut rng, docs.len(), count).into_vec();
    selected.sort_unstable();

    let mut out: Vec<Document> = docs
        .iter()
        .map(|d| Document {
            is_noisy: Some(false),
            ..d.clone()
        })
        .collect();
    let mut flipped_ids = Vec::with_capacity(count);
    for i in selected {
        let gold = out[i].gold_label.expect("validated");
        let mut draw = rng.random_range(0..k - 1);
        if draw >= gold {
            draw += 1;
        }
        out[i].gold_label = Some(draw);
        out[i].is_noisy = Some(true);
        flipped_ids.push(out[i].id);
    }
    Ok((
        out,
        NoiseReport {
            flipped: flipped_ids.len(),
            flipped_ids,
        },
    ))
}

/// The four character-level perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Swap the letters at `i` and `i + 1`.
    Swap(usize),
    /// Delete the letter at `i` (never the first or last).
    Delete(usize),
    /// Replace the letter at `i` with `c`.
    Replace(usize, char),
    /// Insert `c` before position `i`.
    Insert(usize, char),
}

impl Perturbation {
    pub fn apply(self, word: &str) -> String {
        let mut chars: Vec<char> = word.chars().collect();
        match self {
            Perturbation::Swap(i) => chars.swap(i, i + 1),
            Perturbation::Delete(i) => {
                chars.remove(i);
            }
            Perturbation::Replace(i, c) => chars[i] = c,
            Perturbation::Insert(i, c) => chars.insert(i, c),
        }
        chars.into_iter().collect()
    }

    /// Draws one perturbation uniformly among those valid for a word of
    /// `len` characters; words shorter than 3 only get replace/insert.
    fn draw(len: usize, current: &[char], rng: &mut seed::Rng) -> Self {
        let kinds = if len < 3 { 2 } else { 4 };
        let letter = |rng: &mut seed::Rng| (b'a' + rng.random_range(0..26u8)) as char;
        match rng.random_range(0..kinds) {
            0 => {
                let i = rng.random_range(0..len);
                let mut c = letter(rng);
                while c == current[i] {
                    c = letter(rng);
                }
                Perturbation::Replace(i, c)
            }
            1 => {
                let i = if len < 2 { rng.random_range(0..=len) } else { rng.random_range(1..len) };
                Perturbation::Insert(i, letter(rng))
            }
            2 => Perturbation::Swap(rng.random_range(0..len - 1)),
            _ => Perturbation::Delete(rng.random_range(1..len - 1)),
        }
    }
}

/// Perturbs `round(word_rate * word_count)` whitespace-delimited words, each
/// with one uniformly chosen perturbation. Separators are preserved.
pub fn perturb_text(text: &str, word_rate: f64, seed: u64) -> String {
    let spans = word_spans(text);
    let count = ((word_rate.clamp(0.0, 1.0)) * spans.len() as f64).round() as usize;
    if count == 0 {
        return text.to_string();
    }
    let mut rng = seed::stage_rng(seed, "perturb-text");
    let mut chosen: Vec<usize> = index::sample(&mut rng, spans.len(), count).into_vec();
    chosen.sort_unstable();

    let mut out = String::with_capacity(text.len() + count);
    let mut cursor = 0;
    for i in chosen {
        let (start, end) = spans[i];
        out.push_str(&text[cursor..start]);
        let word = &text[start..end];
        let chars: Vec<char> = word.chars().collect();
        out.push_str(&Perturbation::draw(chars.len(), &chars, &mut rng).apply(word));
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    out
}

fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Perturbs the text of `round(instance_rate * n)` documents (each with
/// `word_rate`) and flags them noisy; the rest are flagged clean.
pub fn perturb_instances(docs: &[Document], instance_rate: f64, word_rate: f64, seed: u64) -> Vec<Document> {
    let count = (instance_rate.clamp(0.0, 1.0) * docs.len() as f64).round() as usize;
    let mut rng = seed::stage_rng(seed, "perturb-instances");
    let chosen: BTreeSet<usize> = index::sample(&mut rng, docs.len(), count).into_iter().collect();
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            let noisy = chosen.contains(&i);
            let text = if noisy {
                perturb_text(&d.text, word_rate, seed::derive(seed, &format!("perturb/{}", d.id)))
            } else {
                d.text.clone()
            };
            Document {
                text,
                is_noisy: Some(noisy),
                ..d.clone()
            }
        })
        .collect()
}
