//! Loss, training loop and evaluation.

pub mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::capsules::predictions;
use crate::data::{augment, random_transform, stack, stream_rng, Sample, Suite, TransformSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Array, Real, Tape, Var};

pub use optim::{clip_global_norm, onecycle_lr, AdamW, AdamWConfig, OneCycleConfig};

/// Mean over the batch of `-log softmax(scores)[label]` for `[B, K]` scores.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let mut pick = Array::zeros([b, k]);
    let weight = T::lit(-1.0 / b as f64);
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        pick.data_mut()[row * k + label] = weight;
    }
    let logp = tape.log_softmax(scores, 1)?;
    let pick = tape.leaf(pick);
    let picked = tape.mul(logp, pick)?;
    tape.sum_all(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    /// Global gradient-norm cap; `null` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Evaluate the test suites every this many epochs (and after the last);
    /// 0 evaluates after the last epoch only.
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = OneCycleConfig::default();
        Self {
            epochs: 150,
            batch_size: 128,
            max_lr: 3e-3,
            weight_decay: AdamWConfig::default().weight_decay,
            pct_start: schedule.pct_start,
            div_factor: schedule.div_factor,
            final_div_factor: schedule.final_div_factor,
            clip_norm: Some(10.0),
            seed: 0,
            eval_every: 1,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("train.batch_size and train.eval_batch_size must be positive"));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::invalid("train.max_lr must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pct_start) {
            return Err(Error::invalid("train.pct_start must lie in [0, 1]"));
        }
        if self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return Err(Error::invalid("train.div_factor and train.final_div_factor must be positive"));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::invalid("train.clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn schedule(&self) -> OneCycleConfig {
        OneCycleConfig {
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Metrics of one epoch; `suites` holds per-suite accuracies when the test
/// suites were evaluated after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub suites: Option<Vec<f64>>,
}

/// Training inputs: samples, the regime their transforms are drawn from, and
/// the test suites to track.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub transform: TransformSpec,
    pub augment: bool,
    pub suites: &'a [Suite],
}

#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub history: Vec<EpochMetrics>,
    /// Mean batch loss of every optimisation step.
    pub step_losses: Vec<f64>,
    pub optimizer: AdamW<T>,
}

/// Loss, gradients (in parameter order) and predictions for one batch.
pub fn loss_and_gradients<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    images: Array<T>,
    labels: &[usize],
) -> Result<(f64, Vec<Array<T>>, Vec<usize>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(images);
    let out = model.forward(&mut tape, &bound, x)?;
    let loss = cross_entropy(&mut tape, out.scores, labels)?;
    let value = tape.value(loss).data()[0].as_f64();
    let preds = predictions(tape.value(out.scores));
    let mut grads = tape.backward(loss, Array::scalar(T::one()))?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.values())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Array::zeros(p.shape())))
        .collect();
    Ok((value, grads, preds))
}

/// The training view of sample `index` in `epoch`: optional crop/flip, then
/// a random transform, all drawn from the sample's own stream.
pub fn training_image(sample: &Sample, index: usize, epoch: usize, seed: u64, data: &TrainData) -> Array<f32> {
    let mut rng = stream_rng(seed, epoch as u64, index as u64);
    let base = if data.augment {
        augment(&sample.image, &mut rng)
    } else {
        sample.image.clone()
    };
    random_transform(&base, &data.transform, &mut rng)
}

/// Trains `params` in place with AdamW under the one-cycle schedule.
pub fn train<T: Real>(
    model: &Model,
    params: &mut ParamStore<T>,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainRun<T>> {
    config.validate()?;
    data.transform.validate()?;
    if data.train.is_empty() && config.epochs > 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let per_epoch = config.steps_per_epoch(data.train.len());
    let total = per_epoch * config.epochs;
    let schedule = config.schedule();
    let mut optimizer = AdamW::new(config.adamw(), &params.values().iter().collect::<Vec<_>>());
    let mut history = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::with_capacity(total);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, epoch as u64, u64::MAX));
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(config.batch_size) {
            let step = step_losses.len();
            let images: Vec<Array<f32>> = batch
                .iter()
                .map(|&i| training_image(&data.train[i], i, epoch, config.seed, data))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].label).collect();
            let x = stack::<T>(&images.iter().collect::<Vec<_>>())?;
            let (loss, mut grads, preds) = loss_and_gradients(model, params, x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let norm = clip_global_norm(&mut grads, config.clip_norm.unwrap_or(f64::INFINITY));
            if !norm.is_finite() {
                return Err(Error::NonFiniteGradient { step });
            }
            lr = onecycle_lr(step, total, config.max_lr, &schedule)?;
            optimizer.update(params.values_mut(), &grads, lr)?;
            step_losses.push(loss);
            loss_sum += loss * batch.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let n = data.train.len() as f64;
        let last = epoch + 1 == config.epochs;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let suites = if !data.suites.is_empty() && (last || due) {
            Some(evaluate(model, params, data.suites, config.eval_batch_size)?)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            suites,
        };
        log::info!(
            "epoch {}/{}: loss {:.4} acc {:.4} lr {:.2e}{}",
            metrics.epoch,
            config.epochs,
            metrics.train_loss,
            metrics.train_acc,
            metrics.lr,
            metrics
                .suites
                .as_ref()
                .map(|a| format!(" suites {a:.4?}"))
                .unwrap_or_default()
        );
        history.push(metrics);
    }
    Ok(TrainRun {
        history,
        step_losses,
        optimizer,
    })
}

/// Class predictions for `samples`, evaluated in batches.
pub fn predict<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&Array<f32>> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(stack::<T>(&images)?);
        let fwd = model.forward(&mut tape, &bound, x)?;
        out.extend(predictions(tape.value(fwd.scores)));
    }
    Ok(out)
}

/// Fraction of `predicted` equal to the labels of `samples`; 0 when empty.
pub fn accuracy(predicted: &[usize], samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    hits as f64 / samples.len() as f64
}

/// Accuracy on every suite, in the order given.
pub fn evaluate<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    suites: &[Suite],
    batch_size: usize,
) -> Result<Vec<f64>> {
    suites
        .iter()
        .map(|s| Ok(accuracy(&predict(model, params, &s.samples, batch_size)?, &s.samples)))
        .collect()
}
