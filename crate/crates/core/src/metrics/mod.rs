//! Pixelwise agreement between label maps: confusion counts, Cohen's
//! kappa, Jaccard index, per-class F1, consensus by majority vote, and
//! mean/CI aggregation over reader pairs.
//!
//! The functions on `&[u8]` take raw label planes (or whole volumes) with
//! `0` meaning unlabeled; the `LabelMap` wrappers add the dimension check.

mod aggregate;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{aggregate, t_quantile_975, Aggregate};
pub use report::{agreement_report, AgreementReport, Mode, PairMetrics, ReportRow};

use crate::volume::{LabelMap, UNLABELED};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no pixel is labeled by both readers")]
    EmptyOverlap,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("label {label} outside 1..={classes}")]
    BadLabel { label: u8, classes: usize },
}

/// Counts of `(a, b)` class pairs; row = first reader, column = second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// From rows of counts; `rows[i][j]` pairs class `i + 1` with `j + 1`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(MetricsError::DimensionMismatch("confusion matrix must be square".into()));
        }
        Ok(Self { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count for classes `a` and `b` (1-based).
    pub fn get(&self, a: u8, b: u8) -> u64 {
        self.counts[(a as usize - 1) * self.classes + b as usize - 1]
    }

    pub fn add(&mut self, a: u8, b: u8) -> Result<(), MetricsError> {
        for l in [a, b] {
            if l == UNLABELED || l as usize > self.classes {
                return Err(MetricsError::BadLabel { label: l, classes: self.classes });
            }
        }
        self.counts[(a as usize - 1) * self.classes + b as usize - 1] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + i]).sum()
    }

    pub fn row_sum(&self, a: u8) -> u64 {
        let i = a as usize - 1;
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, b: u8) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + b as usize - 1]).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let c = self.classes;
        let mut t = Self::new(c);
        for i in 0..c {
            for j in 0..c {
                t.counts[j * c + i] = self.counts[i * c + j];
            }
        }
        t
    }
}

fn check_len(a: &[u8], b: &[u8]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(format!("{} vs {} pixels", a.len(), b.len())));
    }
    Ok(())
}

fn check_maps(a: &LabelMap, b: &LabelMap) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch(format!("{} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Confusion over pixels labeled by both readers and accepted by `keep`.
pub fn confusion_where(
    a: &[u8],
    b: &[u8],
    classes: usize,
    keep: impl Fn(u8, u8) -> bool,
) -> Result<ConfusionMatrix, MetricsError> {
    check_len(a, b)?;
    let mut m = ConfusionMatrix::new(classes);
    for (&x, &y) in a.iter().zip(b) {
        if x != UNLABELED && y != UNLABELED && keep(x, y) {
            m.add(x, y)?;
        }
    }
    if m.total() == 0 {
        return Err(MetricsError::EmptyOverlap);
    }
    Ok(m)
}

/// Confusion over pixels labeled by both readers.
pub fn confusion_counts(a: &[u8], b: &[u8], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    confusion_where(a, b, classes, |_, _| true)
}

pub fn confusion(a: &LabelMap, b: &LabelMap) -> Result<ConfusionMatrix, MetricsError> {
    check_maps(a, b)?;
    confusion_counts(a.labels(), b.labels(), a.num_classes().max(b.num_classes()))
}

/// `(p_o − p_e) / (1 − p_e)`, evaluated as
/// `(N·Σdiag − Σ row·col) / (N² − Σ row·col)` with integer numerator and
/// denominator, so only the final division rounds. A matrix with all mass on one diagonal cell
/// (`p_e = 1`) has kappa 1.
pub fn cohens_kappa(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = m.total() as u128;
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let chance: u128 = (1..=m.classes() as u8).map(|c| m.row_sum(c) as u128 * m.col_sum(c) as u128).sum();
    let observed = n * m.diagonal() as u128;
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(1.0);
    }
    let num = observed as i128 - chance as i128;
    Ok(num as f64 / denom as f64)
}

/// Keeps pixels labeled 1 or 2 by both readers, dropping class 3 and
/// unlabeled pixels. Returns the kept pairs and the number dropped among
/// pixels labeled by both.
pub fn two_class_restrict(a: &[u8], b: &[u8]) -> Result<(Vec<u8>, Vec<u8>, usize), MetricsError> {
    check_len(a, b)?;
    let mut ka = Vec::new();
    let mut kb = Vec::new();
    let mut dropped = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x == UNLABELED || y == UNLABELED {
            continue;
        }
        if matches!(x, 1 | 2) && matches!(y, 1 | 2) {
            ka.push(x);
            kb.push(y);
        } else {
            dropped += 1;
        }
    }
    if ka.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    Ok((ka, kb, dropped))
}

/// `|A ∩ B| / |A ∪ B|` for `A = {a = class}`, `B = {b = class}`; `1` when
/// both are empty.
pub fn jaccard(a: &[u8], b: &[u8], class: u8) -> Result<f64, MetricsError> {
    check_len(a, b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == class, y == class);
        inter += (ia && ib) as u64;
        union += (ia || ib) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn jaccard_maps(a: &LabelMap, b: &LabelMap, class: u8) -> Result<f64, MetricsError> {
    check_maps(a, b)?;
    jaccard(a.labels(), b.labels(), class)
}

/// Detection scores of one class against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores over the pixels the ground truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Entry `i` is class `i + 1`.
    pub per_class: Vec<ClassScore>,
    /// Fraction of truth-labeled pixels predicted correctly.
    pub accuracy: f64,
    pub evaluated: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of `class`, plus overall accuracy, over pixels
/// with nonzero `truth`. Undefined ratios are `0`.
pub fn f1_per_class(truth: &[u8], pred: &[u8], class: u8) -> Result<(ClassScore, f64), MetricsError> {
    check_len(truth, pred)?;
    let (mut tp, mut fp, mut fn_, mut correct, mut n) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == UNLABELED {
            continue;
        }
        n += 1;
        correct += (t == p) as u64;
        match (t == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok((ClassScore { precision, recall, f1 }, ratio(correct, n)))
}

/// [`f1_per_class`] for every class `1..=classes`.
pub fn scores(truth: &[u8], pred: &[u8], classes: usize) -> Result<Scores, MetricsError> {
    let mut per_class = Vec::with_capacity(classes);
    let mut accuracy = 0.0;
    for c in 1..=classes as u8 {
        let (s, acc) = f1_per_class(truth, pred, c)?;
        per_class.push(s);
        accuracy = acc;
    }
    let evaluated = truth.iter().filter(|&&t| t != UNLABELED).count() as u64;
    Ok(Scores { per_class, accuracy, evaluated })
}

/// Most frequent nonzero label per pixel, ties to the smallest class id,
/// `0` where every input is unlabeled.
pub fn consensus_labels(maps: &[&[u8]]) -> Result<Vec<u8>, MetricsError> {
    let Some(first) = maps.first() else {
        return Err(MetricsError::TooFewValues { needed: 1, got: 0 });
    };
    for m in maps {
        check_len(first, m)?;
    }
    let mut votes = [0u32; 256];
    Ok((0..first.len())
        .map(|i| {
            votes.fill(0);
            for m in maps {
                votes[m[i] as usize] += 1;
            }
            let mut best = UNLABELED;
            for c in 1..=255u8 {
                if votes[c as usize] > votes[best as usize] || (best == UNLABELED && votes[c as usize] > 0) {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Consensus of at least two maps.
pub fn consensus_mode(maps: &[&LabelMap]) -> Result<LabelMap, MetricsError> {
    if maps.len() < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: maps.len() });
    }
    for m in &maps[1..] {
        check_maps(maps[0], m)?;
    }
    let planes: Vec<&[u8]> = maps.iter().map(|m| m.labels()).collect();
    let labels = consensus_labels(&planes)?;
    let names = maps.iter().max_by_key(|m| m.num_classes()).expect("nonempty").class_names().to_vec();
    LabelMap::from_labels(maps[0].dims(), labels, names).map_err(|e| MetricsError::DimensionMismatch(e.to_string()))
}
