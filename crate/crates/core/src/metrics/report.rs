//! Pairwise reader-agreement reports.
//!
//! CSV columns: `pair_id,metric,class,value,ci_low,ci_high,min,max`. Pair
//! rows carry `value` only; the aggregate rows (`pair_id = "all"`) carry the
//! mean in `value` plus the 95% CI and range. `metric` is `kappa`,
//! `jaccard` (with `class`), or `pixels` / `excluded` (pixel counts).

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{aggregate, cohens_kappa, confusion_where, jaccard, two_class_restrict, Aggregate, MetricsError};
use crate::volume::UNLABELED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Classes 1 and 2 only; pixels either reader marked 3 are excluded.
    #[serde(rename = "2-class")]
    TwoClass,
    #[serde(rename = "3-class")]
    ThreeClass,
}

impl Mode {
    pub fn classes(self, map_classes: usize) -> usize {
        match self {
            Mode::TwoClass => 2,
            Mode::ThreeClass => map_classes,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "2-class" | "2" => Ok(Mode::TwoClass),
            "3-class" | "3" => Ok(Mode::ThreeClass),
            _ => Err(format!("unknown mode {s:?}, expected 2-class or 3-class")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub kappa: f64,
    /// Entry `i` is class `i + 1`.
    pub jaccard: Vec<f64>,
    /// Pixels labeled by both readers that entered the comparison.
    pub pixels: u64,
    /// Pixels labeled by both readers but dropped by the two-class rule.
    pub excluded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub mode: Mode,
    pub readers: Vec<String>,
    pub pairs: Vec<PairMetrics>,
    /// Present with at least two pairs.
    pub kappa: Option<Aggregate>,
    pub jaccard: Vec<Option<Aggregate>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pair_id: String,
    pub metric: String,
    pub class: Option<u8>,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Aggregate {
    /// `mean (lo-hi)[min-max]` with two decimals.
    pub fn table_cell(&self) -> String {
        format!("{:.2} ({:.2}-{:.2})[{:.2}-{:.2}]", self.mean, self.ci_low, self.ci_high, self.min, self.max)
    }
}

/// Metrics of one pair over the pixels both readers labeled.
fn pair_metrics(pair_id: String, a: &[u8], b: &[u8], mode: Mode, classes: usize) -> Result<PairMetrics, MetricsError> {
    let (a, b, excluded) = match mode {
        Mode::TwoClass => two_class_restrict(a, b)?,
        Mode::ThreeClass => {
            let (ka, kb): (Vec<u8>, Vec<u8>) =
                a.iter().zip(b).filter(|(&x, &y)| x != UNLABELED && y != UNLABELED).map(|(&x, &y)| (x, y)).unzip();
            (ka, kb, 0)
        }
    };
    let m = confusion_where(&a, &b, classes, |_, _| true)?;
    let jaccard = (1..=classes as u8).map(|c| jaccard(&a, &b, c)).collect::<Result<_, _>>()?;
    Ok(PairMetrics { pair_id, kappa: cohens_kappa(&m)?, jaccard, pixels: m.total(), excluded: excluded as u64 })
}

/// Every unordered pair of `readers` in input order, then aggregates.
/// Jaccard indices are computed over the same pixels as kappa.
pub fn agreement_report(
    readers: &[(String, &[u8])],
    mode: Mode,
    map_classes: usize,
) -> Result<AgreementReport, MetricsError> {
    if readers.len() < 2 {
        return Err(MetricsError::TooFewValues { needed: 2, got: readers.len() });
    }
    let classes = mode.classes(map_classes);
    let mut pairs = Vec::new();
    for i in 0..readers.len() {
        for j in i + 1..readers.len() {
            let id = format!("{}~{}", readers[i].0, readers[j].0);
            pairs.push(pair_metrics(id, readers[i].1, readers[j].1, mode, classes)?);
        }
    }
    let agg = |vals: Vec<f64>| aggregate(&vals).ok();
    let kappa = agg(pairs.iter().map(|p| p.kappa).collect());
    let jaccard = (0..classes).map(|c| agg(pairs.iter().map(|p| p.jaccard[c]).collect())).collect();
    Ok(AgreementReport { mode, readers: readers.iter().map(|r| r.0.clone()).collect(), pairs, kappa, jaccard })
}

impl AgreementReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let plain = |pair_id: &str, metric: &str, class: Option<u8>, value: f64| ReportRow {
            pair_id: pair_id.into(),
            metric: metric.into(),
            class,
            value,
            ci_low: None,
            ci_high: None,
            min: None,
            max: None,
        };
        let summary = |metric: &str, class: Option<u8>, a: &Aggregate| ReportRow {
            pair_id: "all".into(),
            metric: metric.into(),
            class,
            value: a.mean,
            ci_low: Some(a.ci_low),
            ci_high: Some(a.ci_high),
            min: Some(a.min),
            max: Some(a.max),
        };
        let mut rows = Vec::new();
        for p in &self.pairs {
            rows.push(plain(&p.pair_id, "kappa", None, p.kappa));
            for (c, &j) in p.jaccard.iter().enumerate() {
                rows.push(plain(&p.pair_id, "jaccard", Some(c as u8 + 1), j));
            }
            rows.push(plain(&p.pair_id, "pixels", None, p.pixels as f64));
            rows.push(plain(&p.pair_id, "excluded", None, p.excluded as f64));
        }
        if let Some(k) = &self.kappa {
            rows.push(summary("kappa", None, k));
        }
        for (c, j) in self.jaccard.iter().enumerate() {
            if let Some(j) = j {
                rows.push(summary("jaccard", Some(c as u8 + 1), j));
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_agreement_is_perfect() {
        let a: Vec<u8> = (0..30).map(|i| (i % 4) as u8).collect();
        let r = agreement_report(&[("r1".into(), &a), ("r1b".into(), &a)], Mode::ThreeClass, 3).unwrap();
        assert_eq!(r.pairs[0].kappa, 1.0);
        assert!(r.pairs[0].jaccard.iter().all(|&j| j == 1.0));
        assert!(r.kappa.is_none());
    }

    #[test]
    fn two_class_mode_reports_exclusions() {
        let a = [1u8, 2, 3, 1, 2, 0];
        let b = [1u8, 2, 1, 3, 2, 2];
        let r = agreement_report(&[("a".into(), &a), ("b".into(), &b)], Mode::TwoClass, 3).unwrap();
        assert_eq!((r.pairs[0].pixels, r.pairs[0].excluded, r.pairs[0].jaccard.len()), (3, 2, 2));
    }

    #[test]
    fn csv_has_documented_columns() {
        let a = [1u8, 2, 3, 1];
        let b = [1u8, 2, 1, 1];
        let c = [2u8, 2, 3, 1];
        let r = agreement_report(&[("a".into(), &a), ("b".into(), &b), ("c".into(), &c)], Mode::ThreeClass, 3).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "pair_id,metric,class,value,ci_low,ci_high,min,max");
        assert!(text.lines().any(|l| l.starts_with("all,kappa,,")));
        assert!(r.kappa.unwrap().table_cell().contains('['));
    }
}
