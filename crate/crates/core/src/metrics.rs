//! Multi-class evaluation: confusion matrix, per-class and macro-averaged
//! precision / recall / F1, and accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NUM_CLASSES;
use crate::text::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("y_true has {true_len} entries but y_pred has {pred_len}")]
    LengthMismatch { true_len: usize, pred_len: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("label index {0} is outside 0..3")]
    BadLabel(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
    /// `confusion[true][predicted]`
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Precision is 0 for a class that is never predicted, recall is 0 for a
/// class that never occurs, and F1 is 0 when both are 0.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize]) -> Result<MetricsReport, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch {
            true_len: y_true.len(),
            pred_len: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= NUM_CLASSES {
            return Err(MetricsError::BadLabel(t));
        }
        if p >= NUM_CLASSES {
            return Err(MetricsError::BadLabel(p));
        }
        confusion[t][p] += 1;
    }

    let per_class: [ClassScores; NUM_CLASSES] = std::array::from_fn(|c| {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..NUM_CLASSES).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
            support: actual,
        }
    });

    let mean =
        |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: correct as f64 / y_true.len() as f64,
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        per_class,
        confusion,
    })
}

/// One row of the model-comparison report: F1, precision, recall and
/// accuracy plus the per-class breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub per_class: Vec<NamedClassScores>,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedClassScores {
    pub label: Label,
    #[serde(flatten)]
    pub scores: ClassScores,
}

impl ReportRow {
    pub fn new(name: impl Into<String>, report: &MetricsReport) -> Self {
        Self {
            name: name.into(),
            f1: report.f1,
            precision: report.precision,
            recall: report.recall,
            accuracy: report.accuracy,
            per_class: Label::ALL
                .iter()
                .zip(report.per_class)
                .map(|(&label, scores)| NamedClassScores { label, scores })
                .collect(),
            confusion: report.confusion,
        }
    }
}

/// Fixed-width text table with the columns Model, F1, Precision, Recall,
/// Accuracy.
pub fn format_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>9}  {:>6}  {:>8}\n",
        "Model", "F1", "Precision", "Recall", "Accuracy"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>8.3}  {:>9.3}  {:>6.3}  {:>8.3}\n",
            r.name, r.f1, r.precision, r.recall, r.accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn perfect_predictions() {
        let r = compute_metrics(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(
            (r.accuracy, r.precision, r.recall, r.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn one_mistake() {
        // class 0: P=1 R=1 F=1; class 1: P=1/2 R=1 F=2/3; class 2: P=0 R=0 F=0
        let r = compute_metrics(&[0, 1, 2], &[0, 1, 1]).unwrap();
        assert!(close(r.accuracy, 2.0 / 3.0));
        assert!(close(r.precision, 0.5));
        assert!(close(r.recall, 2.0 / 3.0));
        assert!(close(r.f1, 5.0 / 9.0));
    }

    #[test]
    fn constant_predictions() {
        // class 0: P=1/3 R=1 F=1/2; others all zero
        let r = compute_metrics(&[0, 1, 2], &[0, 0, 0]).unwrap();
        assert!(close(r.accuracy, 1.0 / 3.0));
        assert!(close(r.precision, 1.0 / 9.0));
        assert!(close(r.recall, 1.0 / 3.0));
        assert!(close(r.f1, 1.0 / 6.0));
    }

    #[test]
    fn errors() {
        assert_eq!(
            compute_metrics(&[0, 1], &[0]),
            Err(MetricsError::LengthMismatch {
                true_len: 2,
                pred_len: 1
            })
        );
        assert_eq!(compute_metrics(&[], &[]), Err(MetricsError::Empty));
        assert_eq!(compute_metrics(&[3], &[0]), Err(MetricsError::BadLabel(3)));
    }

    #[test]
    fn table_has_expected_columns() {
        let r = compute_metrics(&[0, 1, 2], &[0, 1, 1]).unwrap();
        let table = format_table(&[ReportRow::new("tiny", &r)]);
        let header = table.lines().next().unwrap();
        assert!(
            header.contains("F1") && header.contains("Precision") && header.contains("Accuracy")
        );
        assert!(table.contains("0.556"));
    }

    #[test]
    fn report_row_serializes() {
        let r = compute_metrics(&[0, 1, 2], &[0, 1, 1]).unwrap();
        let json = serde_json::to_value(ReportRow::new("m", &r)).unwrap();
        assert_eq!(json["name"], "m");
        assert_eq!(json["per_class"][1]["label"], "implicit");
        assert_eq!(json["confusion"][2][1], 1);
    }
}
