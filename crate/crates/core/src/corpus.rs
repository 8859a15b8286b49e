//! Labeled log corpora: tokenization, label vocabulary, seeded splits and
//! word-frequency profiling.
//!
//! The input format is one record per line, `<label>\t<task_id>\t<message>`.
//! `task_id` may be `-`; a two-field line `<label>\t<message>` is accepted
//! with the task id defaulted to `-`. Lines starting with `#` are comments,
//! except for an optional `#labels\t<l1>\t<l2>...` directive which fixes the
//! label order up front. Without the directive labels are indexed in order of
//! first appearance.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Sentinel substituted for every maximal run of digits.
pub const NUM_TOKEN: &str = "<num>";

/// Splits a raw log line into lowercase word tokens.
///
/// Tokens are maximal alphabetic runs, lowercased, or maximal digit runs,
/// which become [`NUM_TOKEN`]. Everything else separates tokens, including
/// letter/digit boundaries (`node7` gives `node`, `<num>`). The literal
/// sentinel text is recognized so tokenizing joined output is a no-op.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut in_digits = false;
    let mut rest = line;

    fn flush(tokens: &mut Vec<String>, word: &mut String, in_digits: &mut bool) {
        if *in_digits {
            tokens.push(NUM_TOKEN.to_string());
            *in_digits = false;
        } else if !word.is_empty() {
            tokens.push(std::mem::take(word));
        }
    }

    while let Some(c) = rest.chars().next() {
        let sentinel = rest.get(..NUM_TOKEN.len()).is_some_and(|s| s.eq_ignore_ascii_case(NUM_TOKEN));
        if sentinel {
            flush(&mut tokens, &mut word, &mut in_digits);
            tokens.push(NUM_TOKEN.to_string());
            rest = &rest[NUM_TOKEN.len()..];
            continue;
        }
        if c.is_numeric() {
            if !in_digits {
                flush(&mut tokens, &mut word, &mut in_digits);
                in_digits = true;
            }
        } else if c.is_alphabetic() {
            if in_digits {
                flush(&mut tokens, &mut word, &mut in_digits);
            }
            word.extend(c.to_lowercase());
        } else {
            flush(&mut tokens, &mut word, &mut in_digits);
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut tokens, &mut word, &mut in_digits);
    tokens
}

/// Ordered set of diagnosis labels. A label's index is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelVocab {
    labels: Vec<String>,
}

impl LabelVocab {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = LabelVocab::default();
        for label in labels {
            let label = label.into();
            if label.is_empty() {
                return Err(Error::InvalidArgument("empty label name".into()));
            }
            if vocab.index_of(&label).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate label {label:?}")));
            }
            vocab.labels.push(label);
        }
        Ok(vocab)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, label: String) -> usize {
        self.labels.push(label);
        self.labels.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub message_id: u64,
    /// Carried through from the input; no model consumes it.
    pub task_id: String,
    pub tokens: Vec<String>,
    pub label_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train, dev or test"
            ))),
        }
    }
}

/// Split ratios plus the seed of the record shuffle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec { train, dev, test, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train, self.dev, self.test];
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument(format!("split ratios must be non-negative, got {ratios:?}")));
        }
        if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios must sum to 1, got {ratios:?}")));
        }
        Ok(())
    }

    /// Assigns a split to each of `n` records. The first `round(n * train)`
    /// records of a seeded shuffle go to train, the next `round(n * dev)` to
    /// dev, the remainder to test.
    pub fn assign(&self, n: usize) -> Vec<Split> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.seed, Stream::Split));
        let n_train = ((n as f64 * self.train).round() as usize).min(n);
        let n_dev = ((n as f64 * self.dev).round() as usize).min(n - n_train);
        let mut splits = vec![Split::Test; n];
        for (rank, &idx) in order.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
        splits
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
            seed: 7,
        }
    }
}

/// Words seen in the train split with their occurrence counts, ids in
/// lexicographic order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordVocab {
    counts: BTreeMap<String, u64>,
}

impl WordVocab {
    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.counts.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(w, c)| (w.as_str(), *c))
    }
}

#[derive(Debug, Clone)]
pub struct LogDataset {
    pub records: Vec<LogRecord>,
    /// `splits[i]` is the split of `records[i]`.
    pub splits: Vec<Split>,
    pub vocab: WordVocab,
    pub labels: LabelVocab,
    pub warnings: Vec<String>,
}

impl LogDataset {
    pub fn from_records(records: Vec<LogRecord>, labels: LabelVocab, split: &SplitSpec) -> Result<Self> {
        split.validate()?;
        if let Some(r) = records.iter().find(|r| r.label_id >= labels.len()) {
            return Err(Error::InvalidArgument(format!(
                "record {} has label id {} but only {} labels exist",
                r.message_id,
                r.label_id,
                labels.len()
            )));
        }
        let splits = split.assign(records.len());
        let mut counts = BTreeMap::new();
        for (record, s) in records.iter().zip(&splits) {
            if *s == Split::Train {
                for t in &record.tokens {
                    *counts.entry(t.clone()).or_insert(0) += 1;
                }
            }
        }
        Ok(LogDataset {
            records,
            splits,
            vocab: WordVocab { counts },
            labels,
            warnings: Vec::new(),
        })
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &LogRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(r, _)| r)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// SHA-256 over the train split's labels and tokens, in record order.
    pub fn train_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for label in self.labels.labels() {
            hasher.update(label.as_bytes());
            hasher.update([0x1f]);
        }
        hasher.update([0x1e]);
        for r in self.split_records(Split::Train) {
            hasher.update(r.message_id.to_le_bytes());
            hasher.update((r.label_id as u64).to_le_bytes());
            for t in &r.tokens {
                hasher.update(t.as_bytes());
                hasher.update([0x1f]);
            }
            hasher.update([0x1e]);
        }
        hex::encode(hasher.finalize())
    }
}

/// Reads and tokenizes a labeled corpus file, then assigns splits.
pub fn load_dataset(path: impl AsRef<Path>, split: &SplitSpec) -> Result<LogDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), split).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

pub fn read_dataset<R: BufRead>(reader: R, split: &SplitSpec) -> Result<LogDataset> {
    split.validate()?;
    let mut labels = LabelVocab::default();
    let mut fixed_labels = false;
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if let Some(directive) = line.strip_prefix("#labels\t") {
            if !records.is_empty() || fixed_labels {
                return Err(Error::Malformed {
                    line: line_no,
                    message: "#labels directive must precede all records".into(),
                });
            }
            labels = LabelVocab::new(directive.split('\t')).map_err(|e| Error::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            fixed_labels = true;
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }

        let mut fields = line.splitn(3, '\t');
        let label = fields.next().unwrap_or_default();
        let (task_id, message) = match (fields.next(), fields.next()) {
            (Some(task), Some(message)) => (task, message),
            (Some(message), None) => ("-", message),
            _ => {
                return Err(Error::Malformed {
                    line: line_no,
                    message: "expected `<label>\\t<task_id>\\t<message>`".into(),
                })
            }
        };
        if label.is_empty() {
            return Err(Error::Malformed {
                line: line_no,
                message: "empty label".into(),
            });
        }
        let label_id = match labels.index_of(label) {
            Some(id) => id,
            None if fixed_labels => {
                return Err(Error::UnknownLabel {
                    line: line_no,
                    label: label.to_string(),
                    known: labels.labels().to_vec(),
                })
            }
            None => labels.push(label.to_string()),
        };
        let tokens = tokenize(message);
        if tokens.is_empty() {
            let warning = format!("line {line_no}: message has no tokens");
            log::warn!("{warning}");
            warnings.push(warning);
        }
        records.push(LogRecord {
            message_id: records.len() as u64,
            task_id: if task_id.is_empty() { "-".into() } else { task_id.to_string() },
            tokens,
            label_id,
        });
    }

    let mut dataset = LogDataset::from_records(records, labels, split)?;
    dataset.warnings = warnings;
    Ok(dataset)
}

/// How lines of a profiled file map to messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProfileInput {
    /// Every line is a raw log message.
    #[default]
    Raw,
    /// Lines use the labeled corpus format; only the message field is profiled.
    Labeled,
}

/// Word occurrence counts over a set of lines. Merging is plain count
/// addition, so shards can be combined in any order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCounts {
    pub bytes: u64,
    pub lines: u64,
    pub counts: HashMap<String, u64>,
}

impl WordCounts {
    pub fn add_line(&mut self, line: &str, input: ProfileInput) {
        if input == ProfileInput::Labeled && line.starts_with('#') {
            return;
        }
        self.lines += 1;
        let message = match input {
            ProfileInput::Raw => line,
            ProfileInput::Labeled => {
                let mut fields = line.splitn(3, '\t');
                let _label = fields.next();
                match (fields.next(), fields.next()) {
                    (Some(_), Some(m)) => m,
                    (Some(m), None) => m,
                    _ => "",
                }
            }
        };
        for token in tokenize(message) {
            *self.counts.entry(token).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: WordCounts) {
        self.bytes += other.bytes;
        self.lines += other.lines;
        for (w, c) in other.counts {
            *self.counts.entry(w).or_insert(0) += c;
        }
    }

    pub fn profile(&self) -> CorpusProfile {
        let total = self.lines as f64;
        let mut p = CorpusProfile {
            dataset_size_bytes: self.bytes,
            total_lines: self.lines,
            distinct_words: self.counts.len() as u64,
            ..Default::default()
        };
        for &c in self.counts.values() {
            p.appear_once += (c == 1) as u64;
            p.below_5 += (c < 5) as u64;
            p.below_10 += (c < 10) as u64;
            p.below_20 += (c < 20) as u64;
            // "at least once per K lines": occurrence count >= total_lines / K
            p.per_10000_lines += (c as f64 >= total / 10_000.0) as u64;
            p.per_1000_lines += (c as f64 >= total / 1_000.0) as u64;
        }
        p
    }
}

/// Word-frequency statistics of a log corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusProfile {
    pub dataset_size_bytes: u64,
    pub total_lines: u64,
    pub distinct_words: u64,
    pub appear_once: u64,
    pub below_5: u64,
    pub below_10: u64,
    pub below_20: u64,
    pub per_10000_lines: u64,
    pub per_1000_lines: u64,
}

impl CorpusProfile {
    /// `count / distinct_words`, or 0 for an empty corpus.
    pub fn fraction(&self, count: u64) -> f64 {
        if self.distinct_words == 0 {
            0.0
        } else {
            count as f64 / self.distinct_words as f64
        }
    }

    fn bucketed(&self) -> [(&'static str, &'static str, u64); 6] {
        [
            ("appear_once", "appear only once", self.appear_once),
            ("below_5", "appear less than 5 times", self.below_5),
            ("below_10", "appear less than 10 times", self.below_10),
            ("below_20", "appear less than 20 times", self.below_20),
            ("per_10000_lines", "appear at least once per 10000 lines", self.per_10000_lines),
            ("per_1000_lines", "appear at least once per 1000 lines", self.per_1000_lines),
        ]
    }

    /// One `key=value` per line, mirroring the struct fields.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset_size_bytes={}", self.dataset_size_bytes);
        let _ = writeln!(out, "total_lines={}", self.total_lines);
        let _ = writeln!(out, "distinct_words={}", self.distinct_words);
        for (key, _, count) in self.bucketed() {
            let _ = writeln!(out, "{key}={count}");
            let _ = writeln!(out, "{key}_fraction={}", self.fraction(count));
        }
        out
    }

    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Dataset size:                   {} bytes", self.dataset_size_bytes);
        let _ = writeln!(out, "Total lines:                    {}", self.total_lines);
        let _ = writeln!(out, "Total number of distinct words: {}", self.distinct_words);
        for (_, title, count) in self.bucketed() {
            let _ = writeln!(out, "{title:<38} {count} ({:.2}%)", 100.0 * self.fraction(count));
        }
        let _ = writeln!(
            out,
            "note: \"at least once per K lines\" counts words whose occurrence count is >= total_lines / K"
        );
        out
    }
}

pub fn profile_reader<R: Read>(reader: R, input: ProfileInput) -> std::io::Result<CorpusProfile> {
    let mut reader = BufReader::new(reader);
    let mut counts = WordCounts::default();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        counts.bytes += n as u64;
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim_end_matches(['\n', '\r']);
        counts.add_line(line, input);
    }
    Ok(counts.profile())
}

/// Profiles a file in one streaming pass.
pub fn profile_corpus(path: impl AsRef<Path>, input: ProfileInput) -> Result<CorpusProfile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    profile_reader(file, input).map_err(|e| Error::io(path, e))
}
