//! Confusion matrices and macro-averaged precision, recall and Jaccard index.

use serde::Serialize;

use crate::error::{Error, Result};

/// `K x K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScores {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    /// Scores of the classes present in the ground truth.
    pub per_class: Vec<ClassScores>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { n_classes: k, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, y_true: usize, y_pred: usize) -> Result<()> {
        let k = self.n_classes;
        if y_true >= k || y_pred >= k {
            return Err(Error::Range(format!(
                "labels ({y_true}, {y_pred}) outside [0, {k})"
            )));
        }
        self.counts[y_true][y_pred] += 1;
        Ok(())
    }

    /// Elementwise sum, for combining evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Macro averages over the classes that occur in the ground truth. A
    /// present class that is never predicted scores precision 0.
    pub fn macro_scores(&self) -> Result<MacroScores> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix has no samples".into()));
        }
        let k = self.n_classes;
        let mut per_class = Vec::new();
        for c in 0..k {
            let support = self.support(c);
            if support == 0 {
                continue;
            }
            let tp = self.counts[c][c] as f64;
            let predicted: u64 = (0..k).map(|r| self.counts[r][c]).sum();
            let fp = predicted as f64 - tp;
            let fn_ = support as f64 - tp;
            let precision = if predicted == 0 { 0.0 } else { tp / (tp + fp) };
            per_class.push(ClassScores {
                class: c,
                support,
                precision,
                recall: tp / (tp + fn_),
                jaccard: tp / (tp + fp + fn_),
            });
        }
        let n = per_class.len() as f64;
        let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / n;
        Ok(MacroScores {
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            jaccard: mean(|s| s.jaccard),
            per_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_pairs(k: usize, pairs: &[(usize, usize)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(k);
        for &(t, p) in pairs {
            cm.accumulate(t, p).unwrap();
        }
        cm
    }

    #[test]
    fn single_accumulation() {
        let cm = from_pairs(9, &[(0, 0)]);
        assert_eq!(cm.counts()[0][0], 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.accumulate(3, 0), Err(Error::Range(_))));
        assert!(matches!(cm.accumulate(0, 7), Err(Error::Range(_))));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(matches!(ConfusionMatrix::new(4).macro_scores(), Err(Error::Empty(_))));
    }

    #[test]
    fn perfect_predictions() {
        let cm = from_pairs(9, &[(0, 0), (3, 3), (8, 8), (3, 3)]);
        let s = cm.macro_scores().unwrap();
        assert_eq!((s.precision, s.recall, s.jaccard), (1.0, 1.0, 1.0));
        assert_eq!(s.per_class.len(), 3);
    }

    #[test]
    fn hand_computed_two_class_case() {
        // class 0: TP 1, FP 0, FN 1; class 1: TP 2, FP 1, FN 0
        let cm = from_pairs(2, &[(0, 0), (0, 1), (1, 1), (1, 1)]);
        let s = cm.macro_scores().unwrap();
        assert!((s.precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.jaccard - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn never_predicted_class_scores_zero_precision() {
        let cm = from_pairs(3, &[(0, 1), (1, 1)]);
        let s = cm.macro_scores().unwrap();
        assert_eq!(s.per_class[0].precision, 0.0);
        assert_eq!(s.per_class[0].jaccard, 0.0);
        // class 2 absent from the truth and never predicted: excluded
        assert_eq!(s.per_class.len(), 2);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = from_pairs(3, &[(0, 0), (1, 2)]);
        let b = from_pairs(3, &[(1, 2), (2, 2)]);
        a.merge(&b).unwrap();
        assert_eq!(a.counts()[1][2], 2);
        assert_eq!(a.total(), 4);
        assert!(a.merge(&ConfusionMatrix::new(4)).is_err());
    }

    proptest! {
        #[test]
        fn accumulation_is_order_independent(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let a = from_pairs(5, &pairs);
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(&a, &from_pairs(5, &rev));
            prop_assert_eq!(a.total(), pairs.len() as u64);
        }

        #[test]
        fn class_relabeling_is_invariant(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..100), shift in 1usize..4) {
            let a = from_pairs(4, &pairs).macro_scores().unwrap();
            let permuted: Vec<_> = pairs.iter().map(|&(t, p)| ((t + shift) % 4, (p + shift) % 4)).collect();
            let b = from_pairs(4, &permuted).macro_scores().unwrap();
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.recall - b.recall).abs() < 1e-12);
            prop_assert!((a.jaccard - b.jaccard).abs() < 1e-12);
        }

        #[test]
        fn jaccard_bounded_by_precision_and_recall(pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..150)) {
            let s = from_pairs(6, &pairs).macro_scores().unwrap();
            for c in &s.per_class {
                prop_assert!(c.jaccard <= c.precision.min(c.recall) + 1e-12);
            }
        }
    }
}
