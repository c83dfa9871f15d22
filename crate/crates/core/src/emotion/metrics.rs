//! Per-class precision/recall/F1, macro and support-weighted averages, and
//! the confusion matrix.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::label::{EmotionClass, NUM_CLASSES};
use super::train::LabeledDataset;
use super::{ClassifierError, EmotionModel};

/// `confusion[i][j]` counts items of true class `i` predicted as `j`.
pub type ConfusionMatrix = [[u64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Averages {
    /// Unweighted mean over classes.
    pub fn macro_of(classes: &[ClassMetrics]) -> Self {
        let n = classes.len() as f64;
        Self {
            precision: classes.iter().map(|c| c.precision).sum::<f64>() / n,
            recall: classes.iter().map(|c| c.recall).sum::<f64>() / n,
            f1: classes.iter().map(|c| c.f1).sum::<f64>() / n,
        }
    }

    /// Support-weighted mean over classes; zero when total support is zero.
    pub fn weighted_of(classes: &[ClassMetrics]) -> Self {
        let total: u64 = classes.iter().map(|c| c.support).sum();
        if total == 0 {
            return Self {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            };
        }
        let w = |f: fn(&ClassMetrics) -> f64| {
            classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        };
        Self {
            precision: w(|c| c.precision),
            recall: w(|c| c.recall),
            f1: w(|c| c.f1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self, ClassifierError> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(ClassifierError::EmptyDataset);
        }
        let per_class = std::array::from_fn(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        });
        let trace: u64 = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        Ok(Self {
            macro_avg: Averages::macro_of(&per_class),
            weighted_avg: Averages::weighted_of(&per_class),
            per_class,
            accuracy: ratio(trace, total),
            confusion,
            total,
        })
    }

    pub fn from_predictions(
        truth: &[EmotionClass],
        predicted: &[EmotionClass],
    ) -> Result<Self, ClassifierError> {
        if truth.len() != predicted.len() {
            return Err(ClassifierError::LengthMismatch {
                probs: predicted.len(),
                labels: truth.len(),
            });
        }
        let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (t, p) in truth.iter().zip(predicted) {
            confusion[t.code()][p.code()] += 1;
        }
        Self::from_confusion(confusion)
    }
}

pub fn evaluate(model: &dyn EmotionModel, test: &LabeledDataset) -> Result<MetricsReport, ClassifierError> {
    if test.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let mut truth = Vec::with_capacity(test.len());
    let mut predicted = Vec::with_capacity(test.len());
    for (image, label) in &test.items {
        truth.push(*label);
        predicted.push(model.predict(image)?.argmax());
    }
    MetricsReport::from_predictions(&truth, &predicted)
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>10}{:>10}{:>10}{:>10}", "", "precision", "recall", "f1-score", "support")?;
        for (c, m) in EmotionClass::ALL.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}",
                c.label(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<14}{:>10}{:>10}{:>10.2}{:>10}", "accuracy", "", "", self.accuracy, self.total)?;
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            writeln!(
                f,
                "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>10}",
                name, a.precision, a.recall, a.f1, self.total
            )?;
        }
        writeln!(f)?;
        writeln!(f, "confusion (rows = true, cols = predicted):")?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            writeln!(f, "{}", cells.join(""))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let truth: Vec<_> = [0, 1, 2, 3, 2, 1].iter().map(|&c| EmotionClass::from_code(c).unwrap()).collect();
        let r = MetricsReport::from_predictions(&truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(r.confusion[i][j], 0);
                }
            }
        }
    }

    #[test]
    fn hand_counted_toy_matrix() {
        let r = MetricsReport::from_confusion([[2, 0, 0, 0], [1, 1, 0, 0], [0; 4], [0; 4]]).unwrap();
        assert!((r.per_class[0].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert!((r.per_class[0].f1 - 0.8).abs() < 1e-15);
        assert_eq!(r.accuracy, 0.75);
        // class 2 never occurs nor is predicted: 0/0 -> 0
        assert_eq!(r.per_class[2].precision, 0.0);
        assert_eq!(r.per_class[2].f1, 0.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert_eq!(
            MetricsReport::from_confusion([[0; 4]; 4]),
            Err(ClassifierError::EmptyDataset)
        );
    }

    #[test]
    fn macro_precision_of_published_rows() {
        let rows = [(0.90, 82), (0.87, 68), (0.91, 71), (0.89, 55)].map(|(p, s)| ClassMetrics {
            precision: p,
            recall: 0.0,
            f1: 0.0,
            support: s,
        });
        let m = Averages::macro_of(&rows);
        assert!((m.precision - 0.8925).abs() < 1e-12);
        assert_eq!(format!("{:.2}", m.precision), "0.89");
    }

    #[test]
    fn report_renders() {
        let r = MetricsReport::from_confusion([[2, 0, 0, 0], [1, 1, 0, 0], [0; 4], [0; 4]]).unwrap();
        let text = r.to_string();
        assert!(text.contains("boredom"));
        assert!(text.contains("weighted avg"));
    }
}
