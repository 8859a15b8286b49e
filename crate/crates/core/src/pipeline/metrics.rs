//! Per-label precision, recall and F1 with macro and micro averages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub per_label: Vec<LabelMetrics>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// Canonical config text of the run.
    pub config: String,
    /// Free-form run facts (mode, split, best epoch, ...), in insertion order.
    pub info: Vec<(String, String)>,
    pub wall_clock_secs: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Scores predictions against gold labels. Labels never predicted get
    /// precision 0; labels absent from the gold set get recall 0.
    pub fn compute(labels: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let k = labels.len();
        if truth.len() != predicted.len() {
            return Err(Error::shape("metrics", &[truth.len()], &[predicted.len()]));
        }
        if let Some(&bad) = truth.iter().chain(predicted).find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label id {bad} out of range for {k} labels")));
        }
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let per_label: Vec<LabelMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted_c: u64 = (0..k).map(|t| confusion[t][c]).sum();
                let support: u64 = confusion[c].iter().sum();
                let precision = ratio(tp, predicted_c);
                let recall = ratio(tp, support);
                LabelMetrics {
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    support,
                }
            })
            .collect();
        let macro_f1 = if k == 0 {
            0.0
        } else {
            per_label.iter().map(|m| m.f1).sum::<f64>() / k as f64
        };
        let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let accuracy = ratio(correct, truth.len() as u64);
        // Single-label: micro precision = micro recall = accuracy.
        let micro_f1 = f1_score(accuracy, accuracy);
        Ok(MetricsReport {
            labels: labels.to_vec(),
            per_label,
            macro_f1,
            micro_f1,
            accuracy,
            confusion,
            config: String::new(),
            info: Vec::new(),
            wall_clock_secs: 0.0,
        })
    }

    pub fn with_info(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.info.push((key.into(), value.to_string()));
        self
    }

    pub fn info(&self, key: &str) -> Option<&str> {
        self.info.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// One `name<TAB>label<TAB>value` line per metric; `-` marks run-level
    /// values. Wall-clock time is the last line.
    pub fn to_tsv(&self) -> String {
        let mut out = self.to_tsv_untimed();
        let _ = writeln!(out, "wall_clock_secs\t-\t{:.3}", self.wall_clock_secs);
        out
    }

    /// [`MetricsReport::to_tsv`] without the timing line; equal for reruns
    /// of the same config and seed.
    pub fn to_tsv_untimed(&self) -> String {
        let mut out = String::from("name\tlabel\tvalue\n");
        for (k, v) in &self.info {
            let _ = writeln!(out, "{k}\t-\t{v}");
        }
        let _ = writeln!(out, "macro_f1\t-\t{:?}", self.macro_f1);
        let _ = writeln!(out, "micro_f1\t-\t{:?}", self.micro_f1);
        let _ = writeln!(out, "accuracy\t-\t{:?}", self.accuracy);
        for (label, m) in self.labels.iter().zip(&self.per_label) {
            let _ = writeln!(out, "precision\t{label}\t{:?}", m.precision);
            let _ = writeln!(out, "recall\t{label}\t{:?}", m.recall);
            let _ = writeln!(out, "f1\t{label}\t{:?}", m.f1);
            let _ = writeln!(out, "support\t{label}\t{}", m.support);
        }
        for (t, row) in self.labels.iter().zip(&self.confusion) {
            for (p, n) in self.labels.iter().zip(row) {
                let _ = writeln!(out, "confusion\t{t}->{p}\t{n}");
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.info {
            let _ = writeln!(out, "{k}: {v}");
        }
        let _ = writeln!(
            out,
            "macro-F1 {:.4}   micro-F1 {:.4}   accuracy {:.4}   wall clock {:.1}s\n",
            self.macro_f1, self.micro_f1, self.accuracy, self.wall_clock_secs
        );
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$}  precision  recall     f1  support", "label");
        for (label, m) in self.labels.iter().zip(&self.per_label) {
            let _ = writeln!(
                out,
                "{label:<width$}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(out, "\nconfusion (rows = true label, columns = predicted)");
        let _ = write!(out, "{:<width$}", "");
        for i in 0..self.labels.len() {
            let _ = write!(out, " {i:>6}");
        }
        out.push('\n');
        for (i, (label, row)) in self.labels.iter().zip(&self.confusion).enumerate() {
            let _ = write!(out, "{:<width$}", format!("{i} {label}"));
            for n in row {
                let _ = write!(out, " {n:>6}");
            }
            out.push('\n');
        }
        if !self.config.is_empty() {
            let _ = write!(out, "\nconfig\n{}", self.config);
        }
        out
    }

    /// Writes `metrics.tsv`, `summary.txt` and `config.cfg` into `dir`
    /// (created if missing).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.tsv", self.to_tsv()),
            ("summary.txt", self.summary()),
            ("config.cfg", self.config.clone()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 1, 0];
        let r = MetricsReport::compute(&labels(4), &y, &y).unwrap();
        assert!(r.per_label.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.micro_f1, 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let truth: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let r = MetricsReport::compute(&labels(4), &truth, &[2; 100]).unwrap();
        assert_eq!(r.micro_f1, 0.25);
        assert_eq!(r.per_label[0].precision, 0.0);
        assert_eq!(r.per_label[0].f1, 0.0);
        assert_eq!(r.per_label[2].recall, 1.0);
        assert_eq!(r.confusion[1][2], 25);
    }

    #[test]
    fn shape_and_range_errors() {
        assert!(MetricsReport::compute(&labels(2), &[0, 1], &[0]).is_err());
        assert!(MetricsReport::compute(&labels(2), &[0, 2], &[0, 1]).is_err());
    }

    #[test]
    fn tsv_has_one_metric_per_line() {
        let r = MetricsReport::compute(&labels(2), &[0, 1, 1], &[0, 1, 0])
            .unwrap()
            .with_info("mode", "full");
        let tsv = r.to_tsv();
        assert!(tsv.lines().all(|l| l.split('\t').count() == 3));
        assert!(tsv.contains("mode\t-\tfull"));
        assert!(tsv.contains("confusion\tl1->l0\t1"));
        assert!(r.summary().contains("macro-F1"));
        assert_eq!(r.info("mode"), Some("full"));
    }

    proptest! {
        #[test]
        fn ranges_and_micro_equals_accuracy(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)
        ) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = MetricsReport::compute(&labels(5), &t, &p).unwrap();
            for m in &r.per_label {
                prop_assert!((0.0..=1.0).contains(&m.precision));
                prop_assert!((0.0..=1.0).contains(&m.recall));
                prop_assert!((m.f1 - f1_score(m.precision, m.recall)).abs() < 1e-15);
            }
            prop_assert!((r.micro_f1 - r.accuracy).abs() < 1e-15);
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total as usize, t.len());
        }
    }
}
