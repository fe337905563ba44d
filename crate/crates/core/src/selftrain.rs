//! Pseudo-label generation with multi-scale and flip inference, and the
//! labeled/pseudo-labeled batch mixer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Params};
use crate::io::{crop_top_left, pad_to_multiple};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Tensor};
use crate::train::{predict, softmax_channels};

/// Anything that maps a (1, c, h, w) image to (1, K, h, w) logits.
pub trait SegModel<T: Scalar> {
    fn num_classes(&self) -> usize;
    /// Input height and width must be multiples of this.
    fn required_multiple(&self) -> usize;
    fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>>;
}

/// A built graph with bound parameters.
pub struct GraphModel<'a, T> {
    pub graph: &'a Graph,
    pub params: &'a Params<T>,
    pub num_classes: usize,
}

impl<T: Scalar> SegModel<T> for GraphModel<'_, T> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn required_multiple(&self) -> usize {
        self.graph.required_multiple
    }

    fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        predict(self.graph, self.params, image.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub scales: Vec<f64>,
    pub use_flip: bool,
    /// A pixel is labeled only if its confidence is strictly above this.
    pub threshold: f64,
    pub ignore_index: u8,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            scales: vec![0.5, 1.0, 2.0],
            use_flip: true,
            threshold: 0.5,
            ignore_index: 255,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config(format!(
                "scales must be nonempty and positive, got {:?}",
                self.scales
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

fn one_pass<T: Scalar, M: SegModel<T> + ?Sized>(model: &M, image: &Tensor<T>, flip: bool) -> Result<Tensor<T>> {
    let s = image.shape();
    let input = if flip { image.flip_w() } else { image.clone() };
    let padded = pad_to_multiple(&input, model.required_multiple());
    let logits = crop_top_left(&model.logits(&padded)?, s.h, s.w);
    if logits.shape().c != model.num_classes() {
        return Err(Error::invalid(
            "multiscale_infer",
            format!(
                "model produced {} classes, expected {}",
                logits.shape().c,
                model.num_classes()
            ),
        ));
    }
    let probs = softmax_channels(&logits);
    Ok(if flip { probs.flip_w() } else { probs })
}

/// Mean class distribution over every (scale, flip) pass, at the input size.
///
/// Each pass resizes the image, pads it to the model's multiple, crops the
/// logits back, applies softmax and resizes the probabilities to the input
/// size. Passes are averaged with equal weight in scale-list order, as a
/// running mean.
pub fn multiscale_infer<T: Scalar, M: SegModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    cfg: &PseudoLabelConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let s = image.shape();
    let mut mean: Option<Tensor<T>> = None;
    let mut passes = 0usize;
    for &scale in &cfg.scales {
        let sh = ((s.h as f64 * scale).round() as usize).max(1);
        let sw = ((s.w as f64 * scale).round() as usize).max(1);
        let scaled = bilinear_resize(image, sh, sw)?;
        let flips: &[bool] = if cfg.use_flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let probs = bilinear_resize(&one_pass(model, &scaled, flip)?, s.h, s.w)?;
            passes += 1;
            match &mut mean {
                // running mean: exact when every pass agrees
                Some(acc) => {
                    let k = T::lit(passes as f64);
                    for (a, &p) in acc.data_mut().iter_mut().zip(probs.data()) {
                        *a += (p - *a) / k;
                    }
                }
                None => mean = Some(probs),
            }
        }
    }
    Ok(mean.expect("at least one pass"))
}

/// Argmax where the top probability is strictly above the threshold, else ignore.
pub fn pseudolabel<T: Scalar>(probs: &Tensor<T>, cfg: &PseudoLabelConfig) -> Result<Vec<u8>> {
    let s = probs.shape();
    if s.c > cfg.ignore_index as usize {
        return Err(Error::invalid(
            "pseudolabel",
            format!("{} classes collide with ignore index {}", s.c, cfg.ignore_index),
        ));
    }
    let plane = s.plane();
    let x = probs.data();
    let thr = T::lit(cfg.threshold);
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| x[(n * s.c + c) * plane + p];
            let mut best = 0;
            for c in 1..s.c {
                if at(c) > at(best) {
                    best = c;
                }
            }
            out.push(if at(best) > thr { best as u8 } else { cfg.ignore_index });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Labeled,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub source: Source,
    pub id: usize,
}

/// Draws batches with a fixed share of ground-truth items.
#[derive(Debug, Clone)]
pub struct MixedBatchSampler {
    labeled: Vec<usize>,
    pseudo: Vec<usize>,
    ratio: f64,
    rng: ChaCha8Rng,
}

impl MixedBatchSampler {
    pub fn new(labeled: Vec<usize>, pseudo: Vec<usize>, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("labeled ratio must lie in [0, 1], got {ratio}")));
        }
        Ok(MixedBatchSampler {
            labeled,
            pseudo,
            ratio,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `round(ratio · batch)` labeled items and the rest pseudo-labeled, in shuffled order.
    pub fn mix_batches(&mut self, batch: usize) -> Result<Vec<BatchItem>> {
        let n_lab = (self.ratio * batch as f64).round() as usize;
        let mut items = Vec::with_capacity(batch);
        for (source, pool, count) in [
            (Source::Labeled, &self.labeled, n_lab),
            (Source::Pseudo, &self.pseudo, batch - n_lab),
        ] {
            if count > 0 && pool.is_empty() {
                return Err(Error::Config(format!("{source:?} source is empty")));
            }
            for _ in 0..count {
                let id = pool[self.rng.random_range(0..pool.len())];
                items.push(BatchItem { source, id });
            }
        }
        items.shuffle(&mut self.rng);
        Ok(items)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Shape;

    /// Emits fixed per-class logits at every pixel.
    struct Constant(Vec<f64>, usize);

    impl SegModel<f64> for Constant {
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn required_multiple(&self) -> usize {
            self.1
        }
        fn logits(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
            let s = image.shape();
            assert_eq!((s.h % self.1, s.w % self.1), (0, 0));
            Ok(Tensor::from_fn(
                Shape::new(s.n, self.0.len(), s.h, s.w),
                |[_, c, _, _]| self.0[c],
            ))
        }
    }

    /// Logit of class 0 is a ramp along the width, flipping the winner at the center.
    struct Ramp;

    impl SegModel<f64> for Ramp {
        fn num_classes(&self) -> usize {
            2
        }
        fn required_multiple(&self) -> usize {
            1
        }
        fn logits(&self, image: &Tensor<f64>) -> Result<Tensor<f64>> {
            let s = image.shape();
            Ok(Tensor::from_fn(Shape::new(1, 2, s.h, s.w), |[_, c, _, x]| {
                if c == 0 {
                    image.at([0, 0, 0, x])
                } else {
                    0.0
                }
            }))
        }
    }

    fn image(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| (c + y + x) as f64 * 0.1)
    }

    #[test]
    fn constant_stub_returns_its_distribution() {
        let m = Constant(vec![0.3, -1.0, 2.0], 8);
        let d = crate::tensor::softmax_vec(&m.0).unwrap();
        let probs = multiscale_infer(&m, &image(12, 20), &PseudoLabelConfig::default()).unwrap();
        assert_eq!(probs.shape(), Shape::new(1, 3, 12, 20));
        for (plane, &want) in probs.data().chunks(240).zip(&d) {
            assert!(plane.iter().all(|&v| v == want));
        }
    }

    #[test]
    fn single_scale_equals_plain_softmax() {
        let cfg = PseudoLabelConfig {
            scales: vec![1.0],
            use_flip: false,
            ..Default::default()
        };
        let img = Tensor::from_fn(Shape::new(1, 1, 1, 6), |[_, _, _, x]| x as f64 - 2.5);
        let probs = multiscale_infer(&Ramp, &img, &cfg).unwrap();
        assert_eq!(probs, softmax_channels(&Ramp.logits(&img).unwrap()));
    }

    #[test]
    fn flip_pass_averages_with_mirror() {
        // p from the plain pass and q from the flipped pass: result (p + q) / 2
        let img = Tensor::from_fn(Shape::new(1, 1, 1, 4), |[_, _, _, x]| x as f64);
        let cfg = PseudoLabelConfig {
            scales: vec![1.0],
            use_flip: true,
            ..Default::default()
        };
        let probs = multiscale_infer(&Ramp, &img, &cfg).unwrap();
        let p = softmax_channels(&Ramp.logits(&img).unwrap());
        let q = softmax_channels(&Ramp.logits(&img.flip_w()).unwrap()).flip_w();
        for i in 0..8 {
            assert!((probs.data()[i] - (p.data()[i] + q.data()[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pseudolabel_examples() {
        let cfg = PseudoLabelConfig::default();
        let t = |v: Vec<f64>, c: usize| Tensor::new(Shape::new(1, c, 1, 1), v).unwrap();
        assert_eq!(pseudolabel(&t(vec![0.6, 0.4], 2), &cfg).unwrap(), vec![0]);
        let third = 1.0 / 3.0;
        assert_eq!(pseudolabel(&t(vec![third; 3], 3), &cfg).unwrap(), vec![255]);
        assert_eq!(pseudolabel(&t(vec![0.5, 0.5], 2), &cfg).unwrap(), vec![255]);
        let zero = PseudoLabelConfig { threshold: 0.0, ..cfg };
        assert_eq!(pseudolabel(&t(vec![0.2, 0.3, 0.5], 3), &zero).unwrap(), vec![2]);
    }

    #[test]
    fn batch_mixing() {
        let mut s = MixedBatchSampler::new((0..10).collect(), (100..120).collect(), 0.5, 9).unwrap();
        let b = s.mix_batches(8).unwrap();
        assert_eq!(b.iter().filter(|i| i.source == Source::Labeled).count(), 4);
        assert!(b.iter().all(|i| (i.source == Source::Labeled) == (i.id < 10)));
        let mut again = MixedBatchSampler::new((0..10).collect(), (100..120).collect(), 0.5, 9).unwrap();
        assert_eq!(again.mix_batches(8).unwrap(), b);
        let mut all = MixedBatchSampler::new((0..10).collect(), vec![], 1.0, 9).unwrap();
        assert!(all.mix_batches(6).unwrap().iter().all(|i| i.source == Source::Labeled));
        let mut none = MixedBatchSampler::new(vec![], (0..3).collect(), 0.5, 9).unwrap();
        assert!(none.mix_batches(4).is_err());
    }

    fn prob_map() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..5, 1usize..30).prop_flat_map(|(k, n)| (Just(k), prop::collection::vec(0.01f64..1.0, k * n)))
    }

    proptest! {
        #[test]
        fn threshold_monotone((k, raw) in prob_map(), a in 0.0f64..0.99, b in 0.0f64..0.99) {
            let n = raw.len() / k;
            // normalize per pixel
            let mut data = vec![0.0; raw.len()];
            for p in 0..n {
                let z: f64 = (0..k).map(|c| raw[c * n + p]).sum();
                for c in 0..k {
                    data[c * n + p] = raw[c * n + p] / z;
                }
            }
            let probs = Tensor::new(Shape::new(1, k, 1, n), data).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ignored = |t: f64| {
                let cfg = PseudoLabelConfig { threshold: t, ..Default::default() };
                let l = pseudolabel(&probs, &cfg).unwrap();
                prop_assert!(l.iter().all(|&v| (v as usize) < k || v == 255));
                Ok(l.iter().filter(|&&v| v == 255).count())
            };
            prop_assert!(ignored(lo)? <= ignored(hi)?);
        }
    }
}
