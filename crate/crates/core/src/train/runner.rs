use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::data::{argmax_labels, image_to_tensor};
use super::ohem::{cross_entropy_ohem, OhemConfig};
use super::optim::{cosine_lr, sgd_step, EmaState, SgdState};
use crate::error::{Error, Result};
use crate::graph::{backward_from, forward, Graph, Params};
use crate::io::Sample;
use crate::metrics::ConfusionMatrix;
use crate::model::{INPUT, LOGITS};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    #[serde(default)]
    pub ohem: OhemConfig,
    pub ema_decay: f64,
    pub seed: u64,
    /// Defaults to no augmentation at the sample size.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Evaluate every this many steps (0: only after the last step).
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            )));
        }
        self.ohem.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub params: Params<T>,
    pub ema: EmaState<T>,
    pub trace: Vec<TraceRow>,
}

fn batch_tensors<T: Scalar>(
    samples: &[&Sample],
    rng: &mut ChaCha8Rng,
    aug: &AugmentConfig,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::new();
    for s in samples {
        let (img, lab) = augment(&image_to_tensor::<T>(&s.image), &s.label.data, rng, aug)?;
        images.push(img);
        labels.extend(lab);
    }
    Ok((Tensor::stack(&images)?, labels))
}

/// Logits of the model for a (n, c, h, w) image batch, inference mode.
pub fn predict<T: Scalar>(g: &Graph, params: &Params<T>, images: Tensor<T>) -> Result<Tensor<T>> {
    let trace = forward(g, params, &BTreeMap::from([(INPUT.to_string(), images)]), BnMode::Infer)?;
    Ok(trace.output(g, LOGITS)?.clone())
}

/// Confusion matrix of argmax predictions over `samples`.
pub fn evaluate<T: Scalar>(
    g: &Graph,
    params: &Params<T>,
    samples: &[Sample],
    num_classes: usize,
    ignore_index: u8,
    batch: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes, ignore_index);
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<Tensor<T>> = chunk.iter().map(|s| image_to_tensor(&s.image)).collect();
        let logits = predict(g, params, Tensor::stack(&images)?)?;
        let pred = argmax_labels(&logits)?;
        let truth: Vec<u8> = chunk.iter().flat_map(|s| s.label.data.iter().copied()).collect();
        cm.accumulate(&pred, &truth)?;
    }
    Ok(cm)
}

/// Momentum SGD with cosine decay, OHEM loss and EMA, fully determined by
/// `cfg.seed`, the initial parameters and the data.
///
/// Batches are drawn from a fresh shuffle of `train` each epoch.
pub fn train_loop<T: Scalar>(
    g: &Graph,
    init: Params<T>,
    train: &[Sample],
    eval: &[Sample],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    init.check_bound(g)?;
    let aug = cfg
        .augment
        .unwrap_or_else(|| AugmentConfig::identity(first.image.height, first.image.width));
    let logits_id = g.output(LOGITS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut ema = EmaState::new(&params, cfg.ema_decay);
    let mut sgd = SgdState::default();
    let mut trace = Vec::with_capacity(cfg.total_steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..cfg.total_steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (images, labels) = batch_tensors::<T>(&picked, &mut rng, &aug)?;
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr0);
        let fwd = forward(
            g,
            &params,
            &BTreeMap::from([(INPUT.to_string(), images)]),
            BnMode::Train,
        )?;
        let out = cross_entropy_ohem(fwd.value(logits_id), &labels, &cfg.ohem)?;
        let loss = out.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let grads = backward_from(g, &params, &fwd, vec![(logits_id, out.grad)])?;
        fwd.apply_buffer_updates(&mut params);
        sgd_step(
            g,
            &mut params,
            &grads.params,
            &mut sgd,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        ema.update(&params)?;
        let last = step + 1 == cfg.total_steps;
        let due = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        let miou = if due && !eval.is_empty() {
            Some(evaluate(g, &params, eval, num_classes, cfg.ohem.ignore_index, cfg.batch)?.miou()?)
        } else {
            None
        };
        trace.push(TraceRow { step, lr, loss, miou });
    }
    Ok(TrainOutput { params, ema, trace })
}

/// Writes `step,lr,loss,miou` rows; an absent mIoU is an empty field.
pub fn write_trace_csv(mut w: impl Write, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,lr,loss,miou")?;
    for r in rows {
        let miou = r.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(w, "{},{:.8e},{:.8e},{}", r.step, r.lr, r.loss, miou)?;
    }
    Ok(())
}
