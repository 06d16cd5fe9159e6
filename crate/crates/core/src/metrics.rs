//! Accuracy, confusion matrices and per-class precision/recall/F1.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// CSV with a `true\predicted` corner cell and class names on both axes.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], class_names: &[&str]) -> Result<ConfusionMatrix> {
    let c = class_names.len();
    if truth.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; c]; c];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= c {
                return Err(Error::LabelOutOfRange { label, num_classes: c });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
    })
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(Error::Data(format!(
            "accuracy needs equal non-empty sequences, got {} and {}",
            truth.len(),
            predicted.len()
        )));
    }
    let hits = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Zero denominators yield 0.0 and set the matching flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (0..cm.num_classes())
        .map(|c| {
            let diag = cm.counts[c][c];
            let precision = ratio(diag, cols[c]);
            let recall = ratio(diag, rows[c]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                class: cm.class_names[c].clone(),
                precision,
                recall,
                f1,
                support: rows[c],
                predicted: cols[c],
                precision_undefined: cols[c] == 0,
                recall_undefined: rows[c] == 0,
            }
        })
        .collect()
}

/// Contents of `metrics_task<k>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: u8,
    pub split: String,
    pub samples: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new(task: u8, split: &str, loss: f64, cm: ConfusionMatrix) -> Self {
        Self {
            task,
            split: split.to_string(),
            samples: cm.total(),
            loss,
            accuracy: cm.accuracy(),
            per_class: per_class_prf(&cm),
            confusion: cm,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const AB: [&str; 2] = ["a", "b"];

    #[test]
    fn hand_counted_matrix() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], &AB).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        let prf = per_class_prf(&cm);
        assert_eq!(prf[1].precision, 0.5);
        assert_eq!(prf[1].recall, 1.0);
        assert!((prf[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cm.to_csv(), "true\\predicted,a,b\na,1,1\nb,0,1\n");
        let named = confusion(&[0], &[0], &["healthy(A,B)", "ictal(E)"]).unwrap();
        assert!(named
            .to_csv()
            .starts_with("true\\predicted,\"healthy(A,B)\",ictal(E)\n\"healthy(A,B)\",1,0\n"));
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let y = [0, 2, 1, 2];
        let cm = confusion(&y, &y, &["a", "b", "c"]).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert!(per_class_prf(&cm)
            .iter()
            .all(|s| s.precision == 1.0 && s.recall == 1.0 && s.f1 == 1.0));
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn absent_prediction_flags_zero_denominator() {
        let cm = confusion(&[0, 1], &[0, 0], &AB).unwrap();
        let s = &per_class_prf(&cm)[1];
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(s.precision_undefined && !s.recall_undefined);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            confusion(&[0, 2], &[0, 1], &AB),
            Err(Error::LabelOutOfRange {
                label: 2,
                num_classes: 2
            })
        ));
    }

    fn pairs() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..4, n),
                proptest::collection::vec(0usize..4, n),
            )
        })
    }

    proptest! {
        #[test]
        fn trace_over_total_is_accuracy((t, p) in pairs()) {
            let cm = confusion(&t, &p, &["a", "b", "c", "d"]).unwrap();
            prop_assert_eq!(cm.accuracy(), accuracy(&t, &p).unwrap());
            prop_assert_eq!(cm.total(), t.len() as u64);
        }

        #[test]
        fn row_sums_permutation_invariant((t, p) in pairs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut order: Vec<usize> = (0..t.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let tp: Vec<usize> = order.iter().map(|&i| t[i]).collect();
            let pp: Vec<usize> = order.iter().map(|&i| p[i]).collect();
            let names = ["a", "b", "c", "d"];
            prop_assert_eq!(confusion(&t, &p, &names).unwrap(), confusion(&tp, &pp, &names).unwrap());
        }

        #[test]
        fn f1_between_precision_and_recall((t, p) in pairs()) {
            let cm = confusion(&t, &p, &["a", "b", "c", "d"]).unwrap();
            for s in per_class_prf(&cm) {
                let lo = s.precision.min(s.recall);
                let hi = s.precision.max(s.recall);
                prop_assert!(s.f1 >= lo - 1e-12 && s.f1 <= hi + 1e-12);
            }
        }
    }
}
