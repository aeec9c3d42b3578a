//! Evaluation metrics: the 3-way confusion matrix, per-class and overall
//! accuracy, and averaged loss components.

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::loss::LossReport;

/// Confusion counts with rows indexed by the true label and columns by the
/// predicted label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub per_class: [f64; NUM_CLASSES],
    pub overall: f64,
    pub count: u64,
    pub losses: LossReport,
}

/// Accumulates predictions and per-batch losses, then finalizes to
/// [`Metrics`].
#[derive(Clone, Debug, Default)]
pub struct MetricsBuilder {
    confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    loss_sums: LossReport,
    weighted: u64,
}

impl MetricsBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: u8, predicted: u8) {
        self.confusion[truth as usize][predicted as usize] += 1;
    }

    /// Add one batch's loss breakdown, weighted by its sample count.
    pub fn record_losses(&mut self, report: &LossReport, batch_size: usize) {
        let w = batch_size as f64;
        self.loss_sums.l_group += report.l_group * w;
        self.loss_sums.l_s += report.l_s * w;
        self.loss_sums.l_f += report.l_f * w;
        self.loss_sums.l_o += report.l_o * w;
        self.loss_sums.l_sam += report.l_sam * w;
        self.weighted += batch_size as u64;
    }

    pub fn finish(self) -> Metrics {
        let mut per_class = [0.0f64; NUM_CLASSES];
        let mut correct = 0u64;
        let mut total = 0u64;
        for c in 0..NUM_CLASSES {
            let row_total: u64 = self.confusion[c].iter().sum();
            let hit = self.confusion[c][c];
            per_class[c] = if row_total == 0 { 0.0 } else { hit as f64 / row_total as f64 };
            correct += hit;
            total += row_total;
        }
        let overall = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        let losses = if self.weighted == 0 {
            LossReport::default()
        } else {
            let inv = 1.0 / self.weighted as f64;
            let l_group = self.loss_sums.l_group * inv;
            let l_s = self.loss_sums.l_s * inv;
            let l_f = self.loss_sums.l_f * inv;
            let l_o = self.loss_sums.l_o * inv;
            let l_sam = self.loss_sums.l_sam * inv;
            LossReport { l_group, l_s, l_f, l_o, l_sam, l_total: l_group + l_s + l_f + l_o + l_sam }
        };
        Metrics { confusion: self.confusion, per_class, overall, count: total, losses }
    }
}

/// Index of the largest logit; ties resolve to the earliest index so
/// predictions are reproducible.
pub fn argmax(row: &[f64]) -> u8 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}
