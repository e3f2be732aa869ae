//! Confusion matrix, per-class and macro F1, accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]` = number of samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_labels(num_classes: usize, predicted: &[usize], truth: &[usize]) -> Result<Self> {
        let mut cm = Self::new(num_classes);
        cm.update(predicted, truth)?;
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds one observation per `(predicted, truth)` pair. Nothing is
    /// recorded if any label is out of range.
    pub fn update(&mut self, predicted: &[usize], truth: &[usize]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::dim("confusion update", truth.len(), predicted.len()));
        }
        let c = self.num_classes;
        if let Some(bad) = predicted.iter().chain(truth).find(|&&l| l >= c) {
            return Err(Error::validation(format!("label {bad} out of range for {c} classes")));
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim("confusion merge", self.num_classes, other.num_classes));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Macro F1 and the per-class F1 scores. Zero denominators resolve to
    /// zero and every declared class contributes to the mean.
    pub fn macro_f1(&self) -> (f64, Vec<f64>) {
        let c = self.num_classes;
        let per_class: Vec<f64> = (0..c)
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let fp = (0..c).filter(|&t| t != k).map(|t| self.counts[t][k]).sum::<u64>() as f64;
                let fn_ = (0..c).filter(|&p| p != k).map(|p| self.counts[k][p]).sum::<u64>() as f64;
                let precision = ratio(tp, tp + fp);
                let recall = ratio(tp, tp + fn_);
                ratio(2.0 * precision * recall, precision + recall)
            })
            .collect();
        let macro_f1 = if c == 0 {
            0.0
        } else {
            per_class.iter().sum::<f64>() / c as f64
        };
        (macro_f1, per_class)
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::validation("accuracy of an empty confusion matrix"));
        }
        let trace: u64 = (0..self.num_classes).map(|k| self.counts[k][k]).sum();
        Ok(trace as f64 / total as f64)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn cm_update(mut cm: ConfusionMatrix, predicted: &[usize], truth: &[usize]) -> Result<ConfusionMatrix> {
    cm.update(predicted, truth)?;
    Ok(cm)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> (f64, Vec<f64>) {
    cm.macro_f1()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.accuracy()
}

/// The metrics JSON emitted by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let (macro_f1, per_class_f1) = cm.macro_f1();
        Ok(Self {
            macro_f1,
            accuracy: cm.accuracy()?,
            per_class_f1,
            confusion: cm.counts.clone(),
        })
    }
}
