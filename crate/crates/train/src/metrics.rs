//! Classification metrics and the per-epoch metric log.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use ctxnorm::{Error, Result};

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Counts of `(truth, prediction)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, truth: &[usize], predicted: &[usize]) {
        for (&t, &p) in truth.iter().zip(predicted) {
            self.counts[t * self.classes + p] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Macro averages run over classes that occur in the truth or the
    /// predictions; a class never predicted has precision 0.
    pub fn metrics(&self, loss: f64) -> Metrics {
        let k = self.classes;
        let total = self.total();
        let correct: u64 = (0..k).map(|i| self.counts[i * k + i]).sum();
        let (mut p_sum, mut r_sum, mut f_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..k {
            let tp = self.counts[c * k + c] as f64;
            let actual: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let predicted: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            if actual == 0 && predicted == 0 {
                continue;
            }
            seen += 1;
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            p_sum += precision;
            r_sum += recall;
            f_sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        }
        let avg = |s: f64| if seen == 0 { 0.0 } else { s / seen as f64 };
        Metrics {
            loss,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            precision: avg(p_sum),
            recall: avg(r_sum),
            f1: avg(f_sum),
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, split: &str, m: Metrics) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            loss: m.loss,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { loss: self.loss, accuracy: self.accuracy, precision: self.precision, recall: self.recall, f1: self.f1 }
    }
}

/// Per-epoch metrics. Epoch 0 describes the untrained model. Wall-clock
/// times are kept beside the rows so the CSV stays deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
    /// Seconds spent training each epoch (`epoch_seconds[0]` is epoch 1).
    pub epoch_seconds: Vec<f64>,
}

impl MetricLog {
    pub fn last(&self, split: &str) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn first(&self, split: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.split == split)
    }

    pub fn split(&self, split: &str) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Header `epoch,split,loss,accuracy,precision,recall,f1`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(["epoch", "split", "loss", "accuracy", "precision", "recall", "f1"]).map_err(csv_err)?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing metrics: {e}")))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header != ["epoch", "split", "loss", "accuracy", "precision", "recall", "f1"] {
            return Err(Error::Config(format!("unexpected metric header {header:?}")));
        }
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>().map_err(csv_err)?;
        Ok(Self { rows, epoch_seconds: Vec::new() })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("metric CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 2, 2], &[0, 1, 2, 2]);
        let m = c.metrics(0.0);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));

        let mut c = Confusion::new(2);
        c.add(&[0, 0, 1, 1], &[0, 0, 0, 0]);
        let m = c.metrics(0.0);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.25);
    }

    #[test]
    fn six_sample_fixture() {
        // truth:     0 0 1 1 2 2
        // predicted: 0 1 1 1 2 0
        let mut c = Confusion::new(3);
        c.add(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]);
        let m = c.metrics(0.0);
        // precision: 1/2, 2/3, 1; recall: 1/2, 1, 1/2.
        let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.precision - (0.5 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!((m.recall - (0.5 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((m.f1 - (f1(0.5, 0.5) + f1(2.0 / 3.0, 1.0) + f1(1.0, 0.5)) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let log = MetricLog {
            rows: vec![
                MetricRow::new(0, "train", Metrics { loss: std::f64::consts::LN_10, accuracy: 0.1, precision: 0.0, recall: 0.1, f1: 0.01 }),
                MetricRow::new(1, "eval", Metrics { loss: 0.1 + 0.2, accuracy: 1.0 / 3.0, precision: 0.5, recall: 0.5, f1: 0.5 }),
            ],
            epoch_seconds: vec![1.5],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,split,loss,accuracy,precision,recall,f1\n"));
        let back = MetricLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows, log.rows);

        let mut empty = Vec::new();
        MetricLog::default().write_csv(&mut empty).unwrap();
        assert!(MetricLog::read_csv(empty.as_slice()).unwrap().rows.is_empty());
    }
}
