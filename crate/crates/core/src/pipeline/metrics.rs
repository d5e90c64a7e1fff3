use serde::Serialize;

use crate::error::{Error, Result};

/// Confusion matrix (rows ground truth, columns prediction) and the four summary metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub acc_micro: f64,
    pub acc_macro: f64,
    pub f1_macro: f64,
    pub jaccard_macro: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Macro averages run over classes that occur in the ground truth; a per-class term with a
    /// zero denominator counts as 0.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|row| row.len() != k) {
            return Err(Error::shape(format!("confusion matrix is not {k}x{k}")));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::EmptyDataset("confusion matrix is empty".into()));
        }
        let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let (mut recall, mut f1, mut iou, mut present) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..k {
            let gt: u64 = confusion[c].iter().sum();
            if gt == 0 {
                continue;
            }
            let pred: u64 = (0..k).map(|r| confusion[r][c]).sum();
            let tp = confusion[c][c];
            let r = ratio(tp, gt);
            let p = ratio(tp, pred);
            recall += r;
            f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            iou += ratio(tp, gt + pred - tp);
            present += 1;
        }
        let n = present as f64;
        Ok(Self { acc_micro: ratio(diag, total), acc_macro: recall / n, f1_macro: f1 / n, jaccard_macro: iou / n, confusion })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }
}

/// Adds `b` into `a` entry by entry.
pub(crate) fn merge_confusion(a: &mut [Vec<u64>], b: &[Vec<u64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (x, y) in ra.iter_mut().zip(rb) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_matrices() {
        let m = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!((m.acc_micro, m.acc_macro, m.f1_macro), (0.75, 0.75, 0.75));
        assert!((m.jaccard_macro - 0.6).abs() < 1e-15);
        let d = MetricsReport::from_confusion(vec![vec![50, 0], vec![0, 50]]).unwrap();
        assert_eq!((d.acc_micro, d.acc_macro, d.f1_macro, d.jaccard_macro), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_class_is_excluded() {
        // class 2 never occurs in the ground truth but is predicted once
        let m = MetricsReport::from_confusion(vec![vec![4, 0, 0], vec![0, 3, 1], vec![0, 0, 0]]).unwrap();
        assert!((m.acc_macro - (1.0 + 0.75) / 2.0).abs() < 1e-15);
        assert!((m.jaccard_macro - (1.0 + 0.75) / 2.0).abs() < 1e-15);
        assert!((m.acc_micro - 7.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(MetricsReport::from_confusion(vec![vec![0, 0], vec![0, 0]]), Err(Error::EmptyDataset(_))));
        assert!(MetricsReport::from_confusion(vec![vec![1, 0]]).is_err());
        // a present class that is never predicted has precision 0/0 and F1 0
        let m = MetricsReport::from_confusion(vec![vec![2, 0], vec![2, 0]]).unwrap();
        assert_eq!(m.f1_macro, (2.0 * 0.5 / 1.5) / 2.0);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_jaccard_identity(cells in proptest::collection::vec(0u64..20, 9)) {
            prop_assume!(cells.iter().sum::<u64>() > 0);
            let c: Vec<Vec<u64>> = cells.chunks(3).map(|r| r.to_vec()).collect();
            let m = MetricsReport::from_confusion(c.clone()).unwrap();
            for v in [m.acc_micro, m.acc_macro, m.f1_macro, m.jaccard_macro] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for k in 0..3 {
                let gt: u64 = c[k].iter().sum();
                let pred: u64 = (0..3).map(|r| c[r][k]).sum();
                let tp = c[k][k];
                if gt + pred == 0 { continue; }
                let j = ratio(tp, gt + pred - tp);
                let f1 = ratio(2 * tp, gt + pred);
                prop_assert!((j - f1 / (2.0 - f1)).abs() < 1e-12);
            }
        }
    }
}
