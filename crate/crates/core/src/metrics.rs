//! Confusion-matrix based segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How classes that appear in neither truth nor prediction enter the mean IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroUnion {
    #[default]
    Exclude,
    CountAsZero,
}

/// K×K counts, rows indexed by truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    ignore_index: u8,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize, ignore_index: u8) -> Self {
        ConfusionMatrix {
            k,
            ignore_index,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Metric(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.k;
        let bad = pred
            .iter()
            .zip(truth)
            .find(|&(&p, &t)| t != self.ignore_index && (t as usize >= k || p as usize >= k));
        if let Some((p, t)) = bad {
            return Err(Error::Metric(format!(
                "class out of range for K={k}: truth {t}, prediction {p}"
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != self.ignore_index {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Metric(format!("cannot merge K={} into K={}", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        self.miou_with(ZeroUnion::Exclude)
    }

    pub fn miou_with(&self, policy: ZeroUnion) -> Result<f64> {
        if self.k < 2 {
            return Err(Error::Metric(format!("mIoU needs K >= 2, got {}", self.k)));
        }
        let ious = self.iou();
        if ious.iter().all(Option::is_none) {
            return Err(Error::Metric("every class has an empty union".into()));
        }
        let vals: Vec<f64> = match policy {
            ZeroUnion::Exclude => ious.into_iter().flatten().collect(),
            ZeroUnion::CountAsZero => ious.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
        };
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric("pixel accuracy of an empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn cm(k: usize, pred: &[u8], truth: &[u8]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k, 255);
        m.accumulate(pred, truth).unwrap();
        m
    }

    #[test]
    fn hand_examples() {
        let m = cm(2, &[0, 1, 0, 1], &[0, 1, 0, 1]);
        assert_eq!(m.get(0, 0) + m.get(1, 1), 4);
        assert_eq!(m.miou().unwrap(), 1.0);
        assert_eq!(m.pixel_accuracy().unwrap(), 1.0);

        let m = cm(2, &[0, 1, 1, 1], &[0, 0, 1, 1]);
        assert_eq!(m.iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(m.miou().unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
        assert!((m.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.pixel_accuracy().unwrap(), 0.75);

        let m = cm(4, &[2, 2, 3, 3], &[0, 0, 1, 1]);
        assert_eq!(m.miou().unwrap(), 0.0);
    }

    #[test]
    fn ignored_truth_leaves_matrix_unchanged() {
        let m = cm(3, &[0, 1, 2], &[255, 255, 255]);
        assert_eq!(m.total(), 0);
        assert!(m.miou().is_err());
        assert!(m.pixel_accuracy().is_err());
    }

    #[test]
    fn out_of_range_and_policy() {
        let mut m = ConfusionMatrix::new(2, 255);
        assert!(m.accumulate(&[2], &[0]).is_err());
        assert!(m.accumulate(&[0], &[3]).is_err());
        assert!(m.accumulate(&[0, 1], &[0]).is_err());
        assert_eq!(m.total(), 0);
        // class 2 never appears
        let m = cm(3, &[0, 1], &[0, 1]);
        assert_eq!(m.miou().unwrap(), 1.0);
        assert!((m.miou_with(ZeroUnion::CountAsZero).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(ConfusionMatrix::new(1, 255).miou().is_err());
    }

    #[test]
    fn uniform_random_accuracy_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = 5u8;
        let n = 200_000;
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let acc = cm(k as usize, &pred, &truth).pixel_accuracy().unwrap();
        // binomial std ≈ 0.0009
        assert!((acc - 0.2).abs() < 0.005, "{acc}");
    }

    fn maps() -> impl Strategy<Value = (usize, Vec<u8>, Vec<u8>)> {
        (2usize..6, 1usize..40).prop_flat_map(|(k, n)| {
            let t = prop_oneof![4 => 0..k as u8, 1 => Just(255u8)];
            (
                Just(k),
                prop::collection::vec(0..k as u8, n),
                prop::collection::vec(t, n),
            )
        })
    }

    proptest! {
        #[test]
        fn permutation_equivariance((k, pred, truth) in maps(), rot in 1usize..5) {
            let m = cm(k, &pred, &truth);
            let perm = |v: u8| if v == 255 { v } else { ((v as usize + rot) % k) as u8 };
            let p2: Vec<u8> = pred.iter().map(|&v| perm(v)).collect();
            let t2: Vec<u8> = truth.iter().map(|&v| perm(v)).collect();
            let m2 = cm(k, &p2, &t2);
            prop_assert_eq!(m.pixel_accuracy().ok(), m2.pixel_accuracy().ok());
            match (m.miou(), m2.miou()) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }

        #[test]
        fn accumulation_is_batch_additive((k, pred, truth) in maps(), cut in 0usize..40) {
            let cut = cut.min(pred.len());
            let whole = cm(k, &pred, &truth);
            let mut a = cm(k, &pred[..cut], &truth[..cut]);
            let b = cm(k, &pred[cut..], &truth[cut..]);
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);
            let mut rev = cm(k, &pred[cut..], &truth[cut..]);
            rev.accumulate(&pred[..cut], &truth[..cut]).unwrap();
            prop_assert_eq!(rev, whole);
        }

        #[test]
        fn metrics_bounded((k, pred, truth) in maps()) {
            let m = cm(k, &pred, &truth);
            if let Ok(v) = m.miou() { prop_assert!((0.0..=1.0).contains(&v)); }
            if let Ok(v) = m.pixel_accuracy() { prop_assert!((0.0..=1.0).contains(&v)); }
        }
    }
}
