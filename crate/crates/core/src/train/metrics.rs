//! Confusion matrix and the scores derived from it.
//!
//! Report text schema, one `key: value` per line, then a CSV table:
//!
//! ```text
//! accuracy: 0.750000
//! fmeasure_weighted: 0.750000
//! kappa: 0.500000
//! num_classes: 2
//! samples: 8
//! class,support,precision,recall,fmeasure
//! 1,4,0.750000,0.750000,0.750000
//! ...
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are the true class, columns the predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::Contract("confusion matrix must be square and nonempty".into()));
        }
        Ok(Self {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.num_classes;
        if truth >= c || predicted >= c {
            return Err(Error::Contract(format!("class index out of range for {c} classes")));
        }
        self.counts[truth * c + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(class, j)).sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, class)).sum()
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Header row of predicted classes, then one row per true class.
    pub fn to_csv(&self) -> String {
        let c = self.num_classes;
        let mut s = String::from("true\\pred");
        for j in 1..=c {
            write!(s, ",{j}").unwrap();
        }
        s.push('\n');
        for i in 0..c {
            write!(s, "{}", i + 1).unwrap();
            for j in 0..c {
                write!(s, ",{}", self.get(i, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassScore>,
    /// Support-weighted mean of the per-class F1.
    pub fmeasure_weighted: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::EmptySplit("evaluation"));
        }
        let c = confusion.num_classes;
        let nf = n as f64;
        let correct: u64 = (0..c).map(|i| confusion.get(i, i)).sum();
        let accuracy = correct as f64 / nf;

        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let per_class: Vec<ClassScore> = (0..c)
            .map(|i| {
                let tp = confusion.get(i, i);
                let support = confusion.row_sum(i);
                let precision = ratio(tp, confusion.col_sum(i));
                let recall = ratio(tp, support);
                let fmeasure = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScore {
                    support,
                    precision,
                    recall,
                    fmeasure,
                }
            })
            .collect();
        let fmeasure_weighted = per_class.iter().map(|s| s.support as f64 * s.fmeasure).sum::<f64>() / nf;

        let p_e: f64 = (0..c)
            .map(|i| confusion.row_sum(i) as f64 * confusion.col_sum(i) as f64)
            .sum::<f64>()
            / (nf * nf);
        // p_e = 1 only when truth and prediction are one and the same class.
        let kappa = if p_e >= 1.0 { 1.0 } else { (accuracy - p_e) / (1.0 - p_e) };
        Ok(Self {
            accuracy,
            per_class,
            fmeasure_weighted,
            kappa,
            confusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.num_classes
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "accuracy: {:.6}", self.accuracy).unwrap();
        writeln!(s, "fmeasure_weighted: {:.6}", self.fmeasure_weighted).unwrap();
        writeln!(s, "kappa: {:.6}", self.kappa).unwrap();
        writeln!(s, "num_classes: {}", self.num_classes()).unwrap();
        writeln!(s, "samples: {}", self.confusion.total()).unwrap();
        s.push_str("class,support,precision,recall,fmeasure\n");
        for (i, c) in self.per_class.iter().enumerate() {
            writeln!(s, "{},{},{:.6},{:.6},{:.6}", i + 1, c.support, c.precision, c.recall, c.fmeasure).unwrap();
        }
        s
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        // Shifted by the first value so identical inputs give std = 0 exactly.
        let base = values.first().copied().unwrap_or(0.0);
        let mean = base + values.iter().map(|v| v - base).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub fmeasure_weighted: MeanStd,
    pub kappa: MeanStd,
}

pub fn average_over_splits(reports: &[MetricsReport]) -> Result<SplitSummary> {
    let first = reports.first().ok_or_else(|| Error::Contract("no reports to average".into()))?;
    if reports.iter().any(|r| r.num_classes() != first.num_classes()) {
        return Err(Error::Contract("reports disagree on the number of classes".into()));
    }
    let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(SplitSummary {
        runs: reports.len(),
        accuracy: pick(|r| r.accuracy),
        fmeasure_weighted: pick(|r| r.fmeasure_weighted),
        kappa: pick(|r| r.kappa),
    })
}
