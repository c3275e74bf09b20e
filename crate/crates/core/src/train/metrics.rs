use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// F1 with a flag for the zero-denominator cases, which score 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub value: f64,
    pub degenerate: bool,
}

/// `2PR / (P + R)` from raw counts; any zero denominator yields 0, flagged.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> F1 {
    if tp == 0 || tp + fp == 0 || tp + fn_ == 0 {
        return F1 {
            value: 0.0,
            degenerate: true,
        };
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    F1 {
        value: 2.0 * p * r / (p + r),
        degenerate: false,
    }
}

/// Confusion counts with Cancer as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Cancer, Label::Cancer) => self.tp += 1,
            (Label::Normal, Label::Cancer) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            (Label::Cancer, Label::Normal) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn pct(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0
}

/// Evaluation summary. Fractions are exact; the `*_pct` fields are the same
/// values as percentages rounded to two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub total: usize,
    /// Samples whose two logits were equal; predicted Normal.
    pub ties: usize,
    pub accuracy: f64,
    pub precision_cancer: f64,
    pub recall_cancer: f64,
    pub f1_cancer: f64,
    pub precision_normal: f64,
    pub recall_normal: f64,
    pub f1_normal: f64,
    pub f1_cancer_degenerate: bool,
    pub f1_normal_degenerate: bool,
    pub accuracy_pct: f64,
    pub f1_normal_pct: f64,
    pub f1_cancer_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub confusion: Confusion,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion, ties: usize) -> Result<Self> {
        let total = c.total();
        if total == 0 {
            return Err(Error::Contract("cannot evaluate an empty dataset".into()));
        }
        let f1c = f1_score(c.tp, c.fp, c.fn_);
        // Normal as positive: its true positives are the true negatives
        let f1n = f1_score(c.tn, c.fn_, c.fp);
        let accuracy = (c.tp + c.tn) as f64 / total as f64;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            total,
            ties,
            accuracy,
            precision_cancer: ratio(c.tp, c.tp + c.fp),
            recall_cancer: ratio(c.tp, c.tp + c.fn_),
            f1_cancer: f1c.value,
            precision_normal: ratio(c.tn, c.tn + c.fn_),
            recall_normal: ratio(c.tn, c.tn + c.fp),
            f1_normal: f1n.value,
            f1_cancer_degenerate: f1c.degenerate,
            f1_normal_degenerate: f1n.degenerate,
            accuracy_pct: pct(accuracy),
            f1_normal_pct: pct(f1n.value),
            f1_cancer_pct: pct(f1c.value),
            loss: None,
            confusion: c,
        })
    }

    /// Argmax over `[n×2]` logits; exact ties go to Normal and are counted.
    pub fn from_logits(logits: &[f64], truth: &[Label]) -> Result<Self> {
        if logits.len() != 2 * truth.len() {
            return Err(Error::Shape(format!(
                "{} logits for {} labels",
                logits.len(),
                truth.len()
            )));
        }
        let (c, ties) = confusion_from_logits(logits, truth);
        Self::from_confusion(c, ties)
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        self.loss = Some(loss);
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("serialising metrics: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let r: Self =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported metrics schema {}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

pub fn predict_label(logits: &[f64]) -> (Label, bool) {
    if logits[1] > logits[0] {
        (Label::Cancer, false)
    } else {
        (Label::Normal, logits[0] == logits[1])
    }
}

pub fn confusion_from_logits(logits: &[f64], truth: &[Label]) -> (Confusion, usize) {
    let mut c = Confusion::default();
    let mut ties = 0;
    for (row, &t) in logits.chunks(2).zip(truth) {
        let (p, tie) = predict_label(row);
        ties += usize::from(tie);
        c.add(t, p);
    }
    (c, ties)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(10, 0, 0).value, 1.0);
        for (fp, fn_) in [(0, 0), (3, 0), (0, 4), (2, 2)] {
            let f = f1_score(0, fp, fn_);
            assert_eq!(f.value, 0.0);
            assert!(f.degenerate);
        }
        // precision 8/10, recall 8/16
        let f = f1_score(8, 2, 8);
        assert!((f.value - 8.0 / 13.0).abs() < 1e-15);
        assert!(!f.degenerate);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [Label::Cancer, Label::Cancer, Label::Normal];
        let perfect = MetricsReport::from_logits(&[0.0, 1.0, 0.0, 2.0, 3.0, 0.0], &truth).unwrap();
        assert_eq!(perfect.accuracy_pct, 100.0);
        assert_eq!(perfect.f1_normal_pct, 100.0);
        assert_eq!(perfect.f1_cancer_pct, 100.0);
        let all_cancer =
            MetricsReport::from_logits(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0], &truth).unwrap();
        assert_eq!(all_cancer.accuracy_pct, 66.67);
        assert_eq!(all_cancer.f1_normal, 0.0);
        assert!(all_cancer.f1_normal_degenerate);
    }

    #[test]
    fn ties_predict_normal() {
        let r = MetricsReport::from_logits(&[0.5, 0.5], &[Label::Cancer]).unwrap();
        assert_eq!(r.ties, 1);
        assert_eq!(r.confusion.fn_, 1);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(
            MetricsReport::from_logits(&[], &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let c = Confusion {
            tp: 5,
            fp: 2,
            tn: 7,
            fn_: 1,
        };
        let r = MetricsReport::from_confusion(c, 0).unwrap().with_loss(0.25);
        let text = r.to_toml().unwrap();
        assert!(text.contains("[confusion]"));
        let back: MetricsReport = toml::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
