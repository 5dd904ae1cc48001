//! Clinical-efficacy and region-recognition scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::StructuredReport;
use crate::volume::{Area, LabelVector};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Scores from counts; each ratio is 0 when its denominator is 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Micro-averaged precision/recall/F1 over all (sample, label) pairs.
pub fn ce_metrics(pred: &[LabelVector], gt: &[LabelVector]) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted label vectors, {} ground-truth",
            pred.len(),
            gt.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("label lengths {} vs {}", p.len(), g.len())));
        }
        for (&a, &b) in p.flags().iter().zip(g.flags()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// Per-area scores of the area names predicted for each slot. `truths[s][k]`
/// is the true area shown at slot `k + 1` of sample `s`. Invalid or missing
/// predictions count against the true area only.
pub fn region_recognition_metrics(preds: &[StructuredReport], truths: &[Vec<Area>]) -> Result<BTreeMap<Area, Prf>> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} reports, {} slot truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut counts: BTreeMap<Area, (usize, usize, usize)> = BTreeMap::new();
    for (report, truth) in preds.iter().zip(truths) {
        let predicted = report.slot_predictions();
        for (k, &area) in truth.iter().enumerate() {
            match predicted.get(&(k + 1)).copied().flatten() {
                Some(p) if p == area => counts.entry(area).or_default().0 += 1,
                Some(p) => {
                    counts.entry(p).or_default().1 += 1;
                    counts.entry(area).or_default().2 += 1;
                }
                None => counts.entry(area).or_default().2 += 1,
            }
        }
        for (&slot, p) in &predicted {
            if let (Some(p), true) = (p, slot == 0 || slot > truth.len()) {
                counts.entry(*p).or_default().1 += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(a, (tp, fp, fn_))| (a, Prf::from_counts(tp, fp, fn_)))
        .collect())
}
