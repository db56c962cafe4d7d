//! Confusion-matrix based segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C x C` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion matrix must be square"));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::dim(format!(
                "mask sizes differ: {} vs {}",
                gt.len(),
                pred.len()
            )));
        }
        let c = self.classes;
        if let Some(&bad) = gt.iter().chain(pred).find(|&&k| k >= c) {
            return Err(Error::invalid(format!("class {bad} out of range 0..{c}")));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("cannot merge confusions of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<Report> {
        let total = self.total();
        if total == 0 {
            return Err(Error::param("empty confusion matrix"));
        }
        let c = self.classes;
        let mut ious = Vec::with_capacity(c);
        let (mut sum_iou, mut sum_p, mut sum_r, mut sum_f1, mut present) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut trace = 0u64;
        for k in 0..c {
            let tp = self.get(k, k);
            trace += tp;
            let gt: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let pred: u64 = (0..c).map(|i| self.get(i, k)).sum();
            if gt == 0 && pred == 0 {
                ious.push(None);
                continue;
            }
            present += 1;
            let (tp, fp, fn_) = (tp as f64, (pred as f64) - tp as f64, (gt as f64) - tp as f64);
            let iou = tp / (tp + fp + fn_);
            let p = if pred > 0 { tp / pred as f64 } else { 0.0 };
            let r = if gt > 0 { tp / gt as f64 } else { 0.0 };
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            ious.push(Some(iou));
            sum_iou += iou;
            sum_p += p;
            sum_r += r;
            sum_f1 += f1;
        }
        let n = present as f64;
        Ok(Report {
            per_class_iou: ious,
            miou: sum_iou / n,
            f1: sum_f1 / n,
            precision: sum_p / n,
            recall: sum_r / n,
            accuracy: trace as f64 / total as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_masks_are_diagonal() {
        let mut c = Confusion::new(3);
        let m = [0, 1, 2, 2, 1];
        c.accumulate(&m, &m).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(c.get(g, p), 0);
                }
            }
        }
        let r = c.report().unwrap();
        assert_eq!((r.miou, r.f1, r.precision, r.recall, r.accuracy), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn off_diagonal_increment() {
        let mut c = Confusion::new(2);
        c.accumulate(&[0; 4], &[1; 4]).unwrap();
        assert_eq!(c.get(0, 1), 4);
        assert!(matches!(c.accumulate(&[2], &[0]), Err(Error::Validation(_))));
        assert!(c.accumulate(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn hand_matrix() {
        let c = Confusion::from_counts(&[vec![3, 1], vec![1, 3]]).unwrap();
        let r = c.report().unwrap();
        assert!((r.per_class_iou[0].unwrap() - 0.6).abs() < 1e-12);
        assert!((r.miou - 0.6).abs() < 1e-12);
        assert!((r.accuracy - 0.75).abs() < 1e-12);
        assert!((r.f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded() {
        let c = Confusion::from_counts(&[vec![3, 1, 0], vec![1, 3, 0], vec![0, 0, 0]]).unwrap();
        let r = c.report().unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert!((r.miou - 0.6).abs() < 1e-12);
        assert!(Confusion::new(2).report().is_err());
    }

    proptest! {
        #[test]
        fn matches_loop_oracle(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let gt: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mut c = Confusion::new(4);
            c.accumulate(&gt, &pred).unwrap();
            let mut naive = [[0u64; 4]; 4];
            for i in 0..gt.len() {
                naive[gt[i]][pred[i]] += 1;
            }
            for g in 0..4 {
                for p in 0..4 {
                    prop_assert_eq!(c.get(g, p), naive[g][p]);
                }
            }
            let r = c.report().unwrap();
            for v in [r.miou, r.f1, r.precision, r.recall, r.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
