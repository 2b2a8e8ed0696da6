//! Training stage: fit the generator so its bounded output maximizes the
//! frozen target's cross-entropy on the training split.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierAdapter, LossSpec, Probabilities};
use crate::data::{apply_delta, project_to_ball, ImageBatch, Perturbation, Split, Stage};
use crate::error::{Result, UapError};
use crate::generator::{sample_noise, GeneratorModel};
use crate::nn::{Optimizer, OptimizerKind, ParamGrads};
use crate::scalar::Scalar;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub shuffle_seed: u64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Rescales each step's gradient to at most this l2 norm; off by default.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn weight_decay() -> f64 {
        0.001
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epsilon() -> f64 {
        10.0
    }
}

impl TrainConfig {
    pub fn new(shuffle_seed: u64) -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            weight_decay: defaults::weight_decay(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            shuffle_seed,
            epsilon: defaults::epsilon(),
            optimizer: OptimizerKind::default(),
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UapError::InvalidConfig(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return bad(format!("max_grad_norm must be > 0, got {m}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean cross-entropy over the epoch's steps.
    pub mean_loss: f64,
    /// Fraction of training examples misclassified at the moment each step saw them.
    pub train_asr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Records with wall time removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Vec<(usize, u64, u64)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.mean_loss.to_bits(), r.train_asr.to_bits()))
            .collect()
    }
}

/// `-ln p`, with `p` floored at [`PROB_FLOOR`].
pub(crate) fn nll<T: Scalar>(p: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    if p <= floor {
        log::debug!("probability {p} floored to {PROB_FLOOR}");
    }
    -(p.max(floor)).ln()
}

/// Mean negative log-probability of the true classes.
pub fn cross_entropy<T: Scalar>(probs: &Probabilities<T>, labels: &[usize]) -> Result<T> {
    if probs.rows() != labels.len() {
        return Err(UapError::shape(
            format!("{} labels", probs.rows()),
            labels.len(),
        ));
    }
    if labels.is_empty() {
        return Err(UapError::Empty("cross_entropy of an empty batch".into()));
    }
    let mut total = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        if l >= probs.num_classes {
            return Err(UapError::InvalidConfig(format!(
                "label {l} out of range for {} classes",
                probs.num_classes
            )));
        }
        total += nll(probs.row(i)[l]);
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// Loss of one batch and its gradient with respect to the generator parameters.
#[derive(Debug, Clone)]
pub struct TrainingGradient<T> {
    pub loss: T,
    /// d(loss)/d(theta), i.e. the ascent direction.
    pub grads: ParamGrads<T>,
    pub probabilities: Probabilities<T>,
}

/// Forward through generator, clipping and target; backward to the generator
/// parameters. Clipped pixels pass no gradient.
pub fn loss_and_generator_gradient<T: Scalar>(
    gen: &GeneratorModel<T>,
    z: &[T],
    target: &dyn ClassifierAdapter<T>,
    images: &ImageBatch<T>,
    labels: &[usize],
) -> Result<TrainingGradient<T>> {
    let net = gen.network();
    net.check_input(z)?;
    let trace = net.forward_trace(z);
    let delta = trace.last().unwrap();
    let adv = apply_delta(images, delta, gen.config().image_shape)?;
    let ig = target.input_gradient(&adv, labels, LossSpec::MeanCrossEntropy)?;
    let range = images.range();
    let mut gdelta = vec![T::zero(); delta.len()];
    for (img, g) in images.images().zip(ig.gradient.chunks_exact(delta.len())) {
        for k in 0..delta.len() {
            let v = img[k] + delta[k];
            if range.contains(v) {
                gdelta[k] += g[k];
            }
        }
    }
    let mut grads = ParamGrads::zeros_like(net);
    net.backward(&trace, gdelta, 0, Some(&mut grads));
    Ok(TrainingGradient {
        loss: ig.loss,
        grads,
        probabilities: ig.probabilities,
    })
}

/// Trains the generator by gradient ascent on the target's cross-entropy and
/// returns the resulting `mid` perturbation with the per-epoch log.
pub fn train_uap<T: Scalar>(
    gen: &mut GeneratorModel<T>,
    target: &dyn ClassifierAdapter<T>,
    train: &Split<T>,
    cfg: &TrainConfig,
) -> Result<(Perturbation<T>, TrainLog)> {
    cfg.validate()?;
    if !target.supports_input_gradient() {
        return Err(UapError::NoInputGradient(target.model_id().to_owned()));
    }
    if train.is_empty() {
        return Err(UapError::Empty("training split".into()));
    }
    if gen.config().epsilon != cfg.epsilon {
        return Err(UapError::InvalidConfig(format!(
            "generator epsilon {} differs from training epsilon {}",
            gen.config().epsilon,
            cfg.epsilon
        )));
    }
    let shape = gen.config().image_shape;
    if train.images.shape() != shape || target.input_shape() != shape {
        return Err(UapError::shape(
            shape,
            format!("data {} / target {}", train.images.shape(), target.input_shape()),
        ));
    }

    let z: Vec<T> = sample_noise(gen.config());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, gen.network());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut fooled) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let mut step =
                loss_and_generator_gradient(gen, &z, target, &batch.images, &batch.labels)?;
            loss_sum += step.loss.as_f64() * chunk.len() as f64;
            fooled += step
                .probabilities
                .argmax()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p != l)
                .count();
            let mut factor = -T::one();
            if let Some(max) = cfg.max_grad_norm {
                let norm = step.grads.norm();
                if norm > max {
                    factor *= T::lit(max / norm);
                }
            }
            // ascent on the loss is descent on its negation
            step.grads.scale(factor);
            opt.step(gen.network_mut(), &step.grads);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_asr: fooled as f64 / train.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} train asr {:.4}",
            cfg.epochs,
            record.mean_loss,
            record.train_asr
        );
        log.records.push(record);
    }

    let delta = project_to_ball(&gen.forward(&z)?, gen.epsilon())?;
    let p = Perturbation::new(delta, shape, gen.epsilon(), Stage::Mid, target.model_id())?;
    Ok((p, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Probabilities<f64> {
        Probabilities {
            num_classes: rows[0].len(),
            data: rows.concat(),
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cross_entropy(&perfect, &[0, 1]).unwrap(), 0.0);

        let uniform = Probabilities {
            num_classes: 38,
            data: vec![1.0 / 38.0; 38],
        };
        assert!((cross_entropy(&uniform, &[5]).unwrap() - 38f64.ln()).abs() < 1e-12);
        assert!((38f64.ln() - 3.6376).abs() < 1e-4);

        let mixed = probs(&[&[0.5, 0.5], &[0.75, 0.25]]);
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((cross_entropy(&mixed, &[0, 1]).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn zero_probability_is_floored_not_nan() {
        let p = probs(&[&[1.0, 0.0]]);
        let v = cross_entropy(&p, &[1]).unwrap();
        assert!(v.is_finite());
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn rejects_zero_epochs() {
        let mut c = TrainConfig::new(0);
        c.epochs = 0;
        assert!(c.validate().is_err());
        c.epochs = 1;
        assert!(c.validate().is_ok());
    }
}
