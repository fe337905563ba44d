use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhemConfig {
    /// Pixels whose true-class probability reaches this value count as easy.
    pub prob_threshold: f64,
    /// Lower bound on the kept fraction of valid pixels.
    pub min_kept_fraction: f64,
    pub ignore_index: u8,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            prob_threshold: 0.7,
            min_kept_fraction: 1.0 / 16.0,
            ignore_index: 255,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.prob_threshold) || !unit(self.min_kept_fraction) {
            return Err(Error::Config(format!(
                "OHEM threshold and min_kept_fraction must lie in (0, 1], got {} and {}",
                self.prob_threshold, self.min_kept_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OhemOutput<T> {
    pub loss: T,
    /// d loss / d logits; zero on dropped and ignored pixels.
    pub grad: Tensor<T>,
    pub kept: usize,
    pub valid: usize,
    /// Set when every pixel carries the ignore label.
    pub all_ignored: bool,
}

/// Softmax cross-entropy averaged over the hard pixels.
///
/// Pixels whose true-class probability is below the threshold are kept. If
/// fewer than `ceil(min_kept_fraction · valid)` qualify, that many of the
/// lowest-probability pixels are kept instead (ties by pixel order).
pub fn cross_entropy_ohem<T: Scalar>(logits: &Tensor<T>, labels: &[u8], cfg: &OhemConfig) -> Result<OhemOutput<T>> {
    cfg.validate()?;
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(Error::invalid(
            "cross_entropy_ohem",
            format!("{} labels for logits {s}", labels.len()),
        ));
    }
    let k = s.c;
    let x = logits.data();
    // per valid pixel: (flat index, true-class probability, nll)
    let mut pix: Vec<(usize, T, T)> = Vec::new();
    for n in 0..s.n {
        for p in 0..plane {
            let i = n * plane + p;
            let t = labels[i];
            if t == cfg.ignore_index {
                continue;
            }
            if t as usize >= k {
                return Err(Error::invalid(
                    "cross_entropy_ohem",
                    format!("label {t} out of range for {k} classes"),
                ));
            }
            let at = |c: usize| x[(n * k + c) * plane + p];
            let m = (0..k).map(at).fold(T::neg_infinity(), T::max);
            let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<T>().ln();
            let nll = lse - at(t as usize);
            pix.push((i, (-nll).exp(), nll));
        }
    }
    let valid = pix.len();
    let mut grad = Tensor::zeros(s);
    if valid == 0 {
        return Ok(OhemOutput {
            loss: T::zero(),
            grad,
            kept: 0,
            valid,
            all_ignored: true,
        });
    }
    let min_kept = ((cfg.min_kept_fraction * valid as f64).ceil() as usize).clamp(1, valid);
    let thr = T::lit(cfg.prob_threshold);
    let hard: Vec<usize> = (0..valid).filter(|&j| pix[j].1 < thr).collect();
    let kept: Vec<usize> = if hard.len() >= min_kept {
        hard
    } else {
        let mut order: Vec<usize> = (0..valid).collect();
        order.sort_by(|&a, &b| {
            pix[a]
                .1
                .partial_cmp(&pix[b].1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(min_kept);
        order.sort_unstable();
        order
    };
    let inv = T::one() / T::lit(kept.len() as f64);
    let mut loss = T::zero();
    let g = grad.data_mut();
    for &j in &kept {
        let (i, _, nll) = pix[j];
        loss += nll;
        let (n, p) = (i / plane, i % plane);
        let t = labels[i] as usize;
        let at = |c: usize| x[(n * k + c) * plane + p];
        let m = (0..k).map(at).fold(T::neg_infinity(), T::max);
        let z: T = (0..k).map(|c| (at(c) - m).exp()).sum();
        for c in 0..k {
            let prob = (at(c) - m).exp() / z;
            let onehot = if c == t { T::one() } else { T::zero() };
            g[(n * k + c) * plane + p] = (prob - onehot) * inv;
        }
    }
    Ok(OhemOutput {
        loss: loss * inv,
        grad,
        kept: kept.len(),
        valid,
        all_ignored: false,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Shape;

    /// Plain mean cross-entropy over non-ignored pixels, by direct loop.
    fn plain_ce(logits: &Tensor<f64>, labels: &[u8], ignore: u8) -> f64 {
        let s = logits.shape();
        let mut total = 0.0;
        let mut count = 0;
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let t = labels[(n * s.h + h) * s.w + w];
                    if t == ignore {
                        continue;
                    }
                    let z: f64 = (0..s.c).map(|c| logits.at([n, c, h, w]).exp()).sum();
                    total += -(logits.at([n, t as usize, h, w]).exp() / z).ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn two_by_two_hand_example() {
        // class-1 minus class-0 logit: ln 9, 0, −ln 3, ln 4 ; labels 1, 1, 0, 0
        let d = [9f64.ln(), 0.0, -(3f64.ln()), 4f64.ln()];
        let logits = Tensor::from_fn(
            Shape::new(1, 2, 2, 2),
            |[_, c, h, w]| if c == 1 { d[h * 2 + w] } else { 0.0 },
        );
        let labels = [1, 1, 0, 0];
        // p_true = 0.9, 0.5, 0.75, 0.2 → threshold 0.7 keeps pixels 1 and 3
        let cfg = OhemConfig {
            prob_threshold: 0.7,
            min_kept_fraction: 0.25,
            ignore_index: 255,
        };
        let out = cross_entropy_ohem(&logits, &labels, &cfg).unwrap();
        assert_eq!(out.kept, 2);
        let want = (-(0.5f64.ln()) - 0.2f64.ln()) / 2.0;
        assert!((out.loss - want).abs() < 1e-12);
        // min_kept 3 pixels → the three hardest: 0.2, 0.5, 0.75
        let cfg3 = OhemConfig {
            min_kept_fraction: 0.75,
            ..cfg
        };
        let out = cross_entropy_ohem(&logits, &labels, &cfg3).unwrap();
        assert_eq!(out.kept, 3);
        let want = (-(0.5f64.ln()) - 0.2f64.ln() - 0.75f64.ln()) / 3.0;
        assert!((out.loss - want).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_keep_min_fraction() {
        let s = Shape::new(1, 3, 8, 8);
        let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let logits = Tensor::from_fn(
            s,
            |[_, c, h, w]| if c == labels[h * 8 + w] as usize { 20.0 } else { 0.0 },
        );
        let out = cross_entropy_ohem(&logits, &labels, &OhemConfig::default()).unwrap();
        assert_eq!(out.kept, 4);
        assert!(out.loss > 0.0);
    }

    #[test]
    fn all_ignored_is_flagged_zero() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let out = cross_entropy_ohem(&logits, &[255; 4], &OhemConfig::default()).unwrap();
        assert!(out.all_ignored);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&v| v == 0.0));
        assert!(cross_entropy_ohem(&logits, &[2, 0, 0, 0], &OhemConfig::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(2, 3, 2, 3);
        let logits = Tensor::<f64>::from_fn(s, |_| rng.random_range(-2.0..2.0));
        let labels: Vec<u8> = (0..12)
            .map(|i| if i == 4 { 255 } else { rng.random_range(0..3) })
            .collect();
        let cfg = OhemConfig {
            prob_threshold: 1.0,
            min_kept_fraction: 1.0,
            ignore_index: 255,
        };
        let out = cross_entropy_ohem(&logits, &labels, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..logits.numel() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (cross_entropy_ohem(&p, &labels, &cfg).unwrap().loss
                - cross_entropy_ohem(&m, &labels, &cfg).unwrap().loss)
                / (2.0 * h);
            assert!((fd - out.grad.data()[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn degenerates_to_plain_ce(seed in any::<u64>(), k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(2, k, 3, 4);
            let logits = Tensor::from_fn(s, |_| rng.random_range(-4.0..4.0));
            let labels: Vec<u8> = (0..24).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k as u8) }).collect();
            prop_assume!(labels.iter().any(|&l| l != 255));
            let cfg = OhemConfig { prob_threshold: 1.0, min_kept_fraction: 1.0, ignore_index: 255 };
            let out = cross_entropy_ohem(&logits, &labels, &cfg).unwrap();
            prop_assert!((out.loss - plain_ce(&logits, &labels, 255)).abs() < 1e-10);
            prop_assert!(out.loss >= 0.0);
        }
    }
}
