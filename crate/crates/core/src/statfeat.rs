//! Per-word label-count statistics.
//!
//! A [`StatDictionary`] maps every train-split word to a vector whose i-th
//! entry counts the word's occurrences in messages labeled `i`. A message is
//! summarized by stacking its tokens' vectors, summing the columns and
//! applying `log1p`; that vector is what the V-Net encodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{LabelVocab, LogDataset, LogRecord, Split};
use crate::error::{Error, Result};

/// Occurrence counts of one word under each label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StatVector(pub Vec<u64>);

impl StatVector {
    pub fn zeros(n: usize) -> Self {
        StatVector(vec![0; n])
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatDictionary {
    entries: BTreeMap<String, StatVector>,
    labels: LabelVocab,
    built_from: String,
}

/// A message's token statistics, padded or truncated to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageStatInput {
    /// `m_fixed` rows of label counts; pad rows are zero.
    pub matrix: Vec<StatVector>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    /// Column sums of `matrix`.
    pub pooled: Vec<u64>,
    /// `log(1 + pooled)`, elementwise.
    pub normalized: Vec<f64>,
}

impl StatDictionary {
    /// Counts token occurrences per label over the train split only.
    pub fn build(dataset: &LogDataset) -> Result<Self> {
        let n = dataset.labels.len();
        let mut entries: BTreeMap<String, StatVector> = BTreeMap::new();
        let mut any = false;
        for record in dataset.split_records(Split::Train) {
            any = true;
            for token in &record.tokens {
                let v = entries
                    .entry(token.clone())
                    .or_insert_with(|| StatVector::zeros(n));
                v.0[record.label_id] += 1;
            }
        }
        if !any {
            return Err(Error::EmptyTrainSplit);
        }
        Ok(StatDictionary {
            entries,
            labels: dataset.labels.clone(),
            built_from: dataset.train_hash(),
        })
    }

    pub fn labels(&self) -> &LabelVocab {
        &self.labels
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    /// Hash of the train split the dictionary was built from.
    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StatVector)> {
        self.entries.iter().map(|(w, v)| (w.as_str(), v))
    }

    /// The stored vector, or all zeros for a word never seen in training.
    pub fn lookup(&self, word: &str) -> StatVector {
        self.entries
            .get(word)
            .cloned()
            .unwrap_or_else(|| StatVector::zeros(self.n_labels()))
    }

    /// Total token count per label, summed over every word.
    pub fn label_totals(&self) -> Vec<u64> {
        let mut totals = vec![0; self.n_labels()];
        for v in self.entries.values() {
            for (t, c) in totals.iter_mut().zip(&v.0) {
                *t += c;
            }
        }
        totals
    }

    pub fn message_stats(&self, record: &LogRecord, m_fixed: usize) -> MessageStatInput {
        self.stats_for_tokens(&record.tokens, m_fixed)
    }

    pub fn stats_for_tokens(&self, tokens: &[String], m_fixed: usize) -> MessageStatInput {
        let n = self.n_labels();
        let mut matrix = Vec::with_capacity(m_fixed);
        let mut mask = Vec::with_capacity(m_fixed);
        let mut pooled = vec![0u64; n];
        for i in 0..m_fixed {
            match tokens.get(i) {
                Some(t) => {
                    let v = self.lookup(t);
                    for (p, c) in pooled.iter_mut().zip(&v.0) {
                        *p += c;
                    }
                    matrix.push(v);
                    mask.push(true);
                }
                None => {
                    matrix.push(StatVector::zeros(n));
                    mask.push(false);
                }
            }
        }
        let normalized = pooled.iter().map(|&p| (p as f64).ln_1p()).collect();
        MessageStatInput {
            matrix,
            mask,
            pooled,
            normalized,
        }
    }

    /// Sorted `word\tc_1,...,c_n` table behind a two-line header naming the
    /// label order and the train-split hash.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("#labels");
        for l in self.labels.labels() {
            out.push('\t');
            out.push_str(l);
        }
        out.push('\n');
        let _ = writeln!(out, "#train_hash\t{}", self.built_from);
        for (word, v) in &self.entries {
            out.push_str(word);
            out.push('\t');
            for (i, c) in v.0.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let malformed = |line: usize, message: &str| Error::Malformed {
            line: line + 1,
            message: message.to_string(),
        };
        let (i, header) = lines.next().ok_or_else(|| malformed(0, "missing #labels header"))?;
        let labels = header
            .strip_prefix("#labels")
            .ok_or_else(|| malformed(i, "missing #labels header"))?;
        let labels = LabelVocab::new(labels.split('\t').skip(1)).map_err(|e| malformed(i, &e.to_string()))?;
        let (i, hash) = lines.next().ok_or_else(|| malformed(1, "missing #train_hash header"))?;
        let built_from = hash
            .strip_prefix("#train_hash\t")
            .ok_or_else(|| malformed(i, "missing #train_hash header"))?
            .to_string();
        let mut entries = BTreeMap::new();
        for (i, line) in lines {
            let (word, counts) = line.split_once('\t').ok_or_else(|| malformed(i, "expected word<TAB>counts"))?;
            let counts = counts
                .split(',')
                .map(|c| c.parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| malformed(i, &e.to_string()))?;
            if counts.len() != labels.len() {
                return Err(malformed(i, "count vector length differs from label count"));
            }
            entries.insert(word.to_string(), StatVector(counts));
        }
        Ok(StatDictionary {
            entries,
            labels,
            built_from,
        })
    }

    /// SHA-256 of the serialized table; identifies the dictionary in
    /// downstream artifacts.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_dataset, SplitSpec};
    use proptest::prelude::*;

    fn all_train(text: &str) -> LogDataset {
        read_dataset(text.as_bytes(), &SplitSpec::new(1.0, 0.0, 0.0, 0).unwrap()).unwrap()
    }

    fn send_dict() -> StatDictionary {
        StatDictionary::build(&all_train("#labels\tA\tB\nA\t-\tsend ok\nB\t-\tsend fail\n")).unwrap()
    }

    #[test]
    fn counts_per_label() {
        let d = send_dict();
        assert_eq!(d.lookup("send").0, vec![1, 1]);
        assert_eq!(d.lookup("ok").0, vec![1, 0]);
        assert_eq!(d.lookup("fail").0, vec![0, 1]);
        assert!(!d.contains("absent"));
    }

    #[test]
    fn repeated_token_counts_twice() {
        let d = StatDictionary::build(&all_train("#labels\tA\tB\nA\t-\tx x\n")).unwrap();
        assert_eq!(d.lookup("x").0, vec![2, 0]);
    }

    #[test]
    fn oov_lookup_is_zero_and_pure() {
        let d = send_dict();
        assert_eq!(d.lookup("unseen").0, vec![0, 0]);
        assert_eq!(d.lookup("send"), d.lookup("send"));
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn message_stats_example() {
        let d = send_dict();
        let tokens = vec!["send".to_string(), "ok".to_string()];
        let s = d.stats_for_tokens(&tokens, 4);
        let rows: Vec<Vec<u64>> = s.matrix.iter().map(|v| v.0.clone()).collect();
        assert_eq!(rows, vec![vec![1, 1], vec![1, 0], vec![0, 0], vec![0, 0]]);
        assert_eq!(s.mask, vec![true, true, false, false]);
        assert_eq!(s.pooled, vec![2, 1]);
        assert_eq!(s.normalized, vec![2f64.ln_1p(), 1f64.ln_1p()]);
        assert!((s.normalized[0] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn all_oov_message_is_zero() {
        let d = send_dict();
        let s = d.stats_for_tokens(&["zzz".to_string()], 3);
        assert_eq!(s.pooled, vec![0, 0]);
        assert_eq!(s.normalized, vec![0.0, 0.0]);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let d = send_dict();
        let tokens: Vec<String> = ["ok", "fail", "send"].iter().map(|s| s.to_string()).collect();
        let s = d.stats_for_tokens(&tokens, 2);
        assert_eq!(s.matrix.len(), 2);
        assert_eq!(s.pooled, vec![1, 1]);
        assert_eq!(s.mask, vec![true, true]);
    }

    #[test]
    fn empty_train_split_rejected() {
        let ds = read_dataset("A\t-\tx\n".as_bytes(), &SplitSpec::new(0.0, 1.0, 0.0, 0).unwrap()).unwrap();
        assert!(matches!(StatDictionary::build(&ds), Err(Error::EmptyTrainSplit)));
    }

    #[test]
    fn test_split_words_never_counted() {
        let word = |i: usize| format!("w{}{}", (b'a' + (i / 26) as u8) as char, (b'a' + (i % 26) as u8) as char);
        let text: String = (0..40).map(|i| format!("{}\t-\tcommon {}\n", ["A", "B"][i % 2], word(i))).collect();
        let ds = read_dataset(text.as_bytes(), &SplitSpec::new(0.5, 0.25, 0.25, 3).unwrap()).unwrap();
        let d = StatDictionary::build(&ds).unwrap();
        for (r, s) in ds.records.iter().zip(&ds.splits) {
            assert_eq!(d.contains(&r.tokens[1]), *s == Split::Train);
        }
        assert_eq!(d.lookup("common").0.iter().sum::<u64>(), ds.split_len(Split::Train) as u64);
    }

    #[test]
    fn tsv_round_trip_is_byte_stable() {
        let d = send_dict();
        let text = d.to_tsv();
        assert!(text.starts_with("#labels\tA\tB\n#train_hash\t"));
        let back = StatDictionary::from_tsv(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_tsv(), text);
        assert_eq!(back.content_hash(), d.content_hash());
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<(usize, Vec<u8>)>> {
        prop::collection::vec((0usize..3, prop::collection::vec(0u8..12, 0..8)), 1..40)
    }

    fn render(recs: &[(usize, Vec<u8>)], perm: &[usize]) -> String {
        let names = ["L0", "L1", "L2"];
        let mut text = String::from("#labels\tL0\tL1\tL2\n");
        for (label, words) in recs {
            let ws: Vec<String> = words.iter().map(|w| format!("w{}", (b'a' + w) as char)).collect();
            text.push_str(&format!("{}\t-\t{}\n", names[perm[*label]], ws.join(" ")));
        }
        text
    }

    proptest! {
        #[test]
        fn conservation_of_tokens(recs in corpus_strategy()) {
            let ds = all_train(&render(&recs, &[0, 1, 2]));
            let d = StatDictionary::build(&ds).unwrap();
            let mut per_label = vec![0u64; 3];
            for r in &ds.records {
                per_label[r.label_id] += r.tokens.len() as u64;
            }
            prop_assert_eq!(d.label_totals(), per_label);
        }

        #[test]
        fn label_permutation_equivariance(recs in corpus_strategy()) {
            let perm = [2usize, 0, 1];
            let base = StatDictionary::build(&all_train(&render(&recs, &[0, 1, 2]))).unwrap();
            let permuted = StatDictionary::build(&all_train(&render(&recs, &perm))).unwrap();
            for (word, v) in base.iter() {
                let p = permuted.lookup(word);
                for (i, c) in v.0.iter().enumerate() {
                    prop_assert_eq!(p.0[perm[i]], *c);
                }
            }
        }

        #[test]
        fn oov_tokens_leave_pooled_unchanged(recs in corpus_strategy(), extra in 0usize..5) {
            let d = StatDictionary::build(&all_train(&render(&recs, &[0, 1, 2]))).unwrap();
            let tokens = recs[0].1.iter().map(|w| format!("w{}", (b'a' + w) as char)).collect::<Vec<_>>();
            let mut padded = tokens.clone();
            padded.extend((0..extra).map(|i| format!("never{i}")));
            let m = padded.len().max(1);
            prop_assert_eq!(d.stats_for_tokens(&tokens, m).pooled, d.stats_for_tokens(&padded, m).pooled);
        }
    }
}
