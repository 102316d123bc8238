//! Evaluation metrics: accuracy, macro-F1, localization IoU, confusion
//! matrix and a token-overlap explanation score.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{BBox, Category};
use crate::reward::region_iou;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("length mismatch: {preds} predictions vs {gts} ground truths")]
    LengthMismatch { preds: usize, gts: usize },
}

fn check_lengths(preds: usize, gts: usize) -> Result<(), MetricsError> {
    if preds != gts {
        return Err(MetricsError::LengthMismatch { preds, gts });
    }
    if preds == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Counts indexed `[ground truth][prediction]`.
pub type Confusion = [[u64; Category::COUNT]; Category::COUNT];

pub fn confusion_matrix(preds: &[Category], gts: &[Category]) -> Result<Confusion, MetricsError> {
    check_lengths(preds.len(), gts.len())?;
    let mut m = [[0u64; Category::COUNT]; Category::COUNT];
    for (p, g) in preds.iter().zip(gts) {
        m[g.index()][p.index()] += 1;
    }
    Ok(m)
}

pub fn accuracy(preds: &[Category], gts: &[Category]) -> Result<f64, MetricsError> {
    check_lengths(preds.len(), gts.len())?;
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Per-class F1 from a confusion matrix; `None` for classes that neither
/// occur nor are predicted.
pub fn per_class_f1(confusion: &Confusion) -> [Option<f64>; Category::COUNT] {
    std::array::from_fn(|c| {
        let tp = confusion[c][c];
        let actual: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            return None;
        }
        let denom = actual + predicted;
        Some(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
    })
}

/// Unweighted mean of per-class F1 over the classes that occur in either
/// the predictions or the ground truth.
pub fn macro_f1(preds: &[Category], gts: &[Category]) -> Result<f64, MetricsError> {
    let per_class = per_class_f1(&confusion_matrix(preds, gts)?);
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanIou {
    pub value: f64,
    /// Samples that entered the mean (those with ground-truth boxes).
    pub count: usize,
    /// No sample had a ground-truth box; `value` is then 1 by convention.
    pub vacuous: bool,
}

/// Mean region IoU over samples whose ground truth has at least one box.
pub fn mean_iou<T: Scalar>(preds: &[Vec<BBox<T>>], gts: &[Vec<BBox<T>>]) -> Result<MeanIou, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    let ious: Vec<f64> =
        preds.iter().zip(gts).filter(|(_, g)| !g.is_empty()).map(|(p, g)| region_iou(p, g).as_f64()).collect();
    if ious.is_empty() {
        return Ok(MeanIou { value: 1.0, count: 0, vacuous: true });
    }
    Ok(MeanIou { value: ious.iter().sum::<f64>() / ious.len() as f64, count: ious.len(), vacuous: false })
}

/// Scores a generated explanation against a reference explanation.
pub trait ExplanationScorer {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

/// Unigram F1 over whitespace tokens, case-folded.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl ExplanationScorer for TokenF1 {
    fn name(&self) -> &str {
        "token_f1"
    }

    fn score(&self, candidate: &str, reference: &str) -> f64 {
        token_f1(candidate, reference)
    }
}

fn bag(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for tok in text.split_whitespace() {
        *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
    }
    counts
}

/// Harmonic mean of unigram precision and recall with clipped counts.
/// Two empty texts score 1, exactly one empty text scores 0.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let (cand, refs) = (bag(candidate), bag(reference));
    let (nc, nr): (usize, usize) = (cand.values().sum(), refs.values().sum());
    match (nc, nr) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let overlap: usize = cand.iter().map(|(t, &c)| c.min(refs.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / nc as f64;
    let recall = overlap as f64 / nr as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_iou: f64,
    pub iou_count: usize,
    pub iou_vacuous: bool,
    pub confusion: Confusion,
    pub explanation_score: Option<f64>,
    pub mean_reward: Option<f64>,
    pub format_rate: Option<f64>,
}

/// One evaluated item: predicted and true category and regions, plus the
/// generated and reference explanations when available.
#[derive(Debug, Clone)]
pub struct EvalItem<T> {
    pub pred: Category,
    pub gt: Category,
    pub pred_boxes: Vec<BBox<T>>,
    pub gt_boxes: Vec<BBox<T>>,
    pub explanation: Option<String>,
    pub explanation_ref: Option<String>,
}

impl EvalReport {
    /// Aggregates items; the explanation score averages over items that
    /// carry both texts.
    pub fn from_items<T: Scalar>(items: &[EvalItem<T>], scorer: &dyn ExplanationScorer) -> Result<Self, MetricsError> {
        let preds: Vec<Category> = items.iter().map(|i| i.pred).collect();
        let gts: Vec<Category> = items.iter().map(|i| i.gt).collect();
        let pb: Vec<Vec<BBox<T>>> = items.iter().map(|i| i.pred_boxes.clone()).collect();
        let gb: Vec<Vec<BBox<T>>> = items.iter().map(|i| i.gt_boxes.clone()).collect();
        let iou = mean_iou(&pb, &gb)?;
        let scores: Vec<f64> = items
            .iter()
            .filter_map(|i| Some(scorer.score(i.explanation.as_deref()?, i.explanation_ref.as_deref()?)))
            .collect();
        Ok(EvalReport {
            n: items.len(),
            accuracy: accuracy(&preds, &gts)?,
            macro_f1: macro_f1(&preds, &gts)?,
            mean_iou: iou.value,
            iou_count: iou.count,
            iou_vacuous: iou.vacuous,
            confusion: confusion_matrix(&preds, &gts)?,
            explanation_score: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            mean_reward: None,
            format_rate: None,
        })
    }

    /// Flat `key = value` block followed by the labelled confusion matrix
    /// (rows are ground truth, columns predictions).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(s, "macro_f1 = {:.6}", self.macro_f1);
        let _ = writeln!(s, "mean_iou = {:.6}", self.mean_iou);
        let _ = writeln!(s, "iou_count = {}", self.iou_count);
        let _ = writeln!(s, "iou_vacuous = {}", self.iou_vacuous);
        if let Some(v) = self.explanation_score {
            let _ = writeln!(s, "explanation_score = {v:.6}");
        }
        if let Some(v) = self.mean_reward {
            let _ = writeln!(s, "mean_reward = {v:.6}");
        }
        if let Some(v) = self.format_rate {
            let _ = writeln!(s, "format_rate = {v:.6}");
        }
        s.push_str(&confusion_table(&self.confusion));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Tab-separated confusion matrix with the wire labels as headers.
pub fn confusion_table(confusion: &Confusion) -> String {
    let mut s = String::from("gt\\pred");
    for c in Category::ALL {
        let _ = write!(s, "\t{}", c.label());
    }
    s.push('\n');
    for g in Category::ALL {
        s.push_str(g.label());
        for count in confusion[g.index()] {
            let _ = write!(s, "\t{count}");
        }
        s.push('\n');
    }
    s
}
