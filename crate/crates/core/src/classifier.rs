//! Uniform handle over frozen target classifiers.

use rayon::prelude::*;

use crate::data::{ImageBatch, ImageShape};
use crate::error::{Result, UapError};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::trainer::nll;

/// Row-major `batch × num_classes` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities<T> {
    pub num_classes: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Probabilities<T> {
    pub fn rows(&self) -> usize {
        self.data.len() / self.num_classes
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Predicted class per row; ties resolve to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.num_classes)
            .map(argmax)
            .collect()
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one score row.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = scores.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Scalar whose input gradient `input_gradient` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    /// Mean cross-entropy of the softmax output against the labels.
    MeanCrossEntropy,
    /// Sum over the batch of the pre-softmax score of each label.
    ClassScore,
}

#[derive(Debug, Clone)]
pub struct InputGradient<T> {
    pub loss: T,
    /// Same layout as the input batch.
    pub gradient: Vec<T>,
    pub probabilities: Probabilities<T>,
}

/// Activation at a named layer for one image and the gradient of the label's
/// pre-softmax score with respect to it.
#[derive(Debug, Clone)]
pub struct LayerGradient<T> {
    pub shape: ImageShape,
    pub activation: Vec<T>,
    pub gradient: Vec<T>,
    pub score: T,
}

/// A frozen classifier. Implementations must never mutate their parameters.
pub trait ClassifierAdapter<T: Scalar>: Send + Sync {
    fn model_id(&self) -> &str;

    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> ImageShape;

    /// Default layer used for saliency maps.
    fn saliency_layer(&self) -> &str;

    fn layer_names(&self) -> Vec<String>;

    /// Pre-softmax class scores, row-major `batch × num_classes`.
    fn scores(&self, images: &ImageBatch<T>) -> Result<Vec<T>>;

    fn predict(&self, images: &ImageBatch<T>) -> Result<Probabilities<T>> {
        let m = self.num_classes();
        let scores = self.scores(images)?;
        Ok(Probabilities {
            num_classes: m,
            data: scores.chunks_exact(m).flat_map(softmax).collect(),
        })
    }

    fn supports_input_gradient(&self) -> bool {
        true
    }

    fn input_gradient(
        &self,
        images: &ImageBatch<T>,
        labels: &[usize],
        loss: LossSpec,
    ) -> Result<InputGradient<T>>;

    fn activation_and_gradient(
        &self,
        images: &ImageBatch<T>,
        layer: &str,
        labels: &[usize],
    ) -> Result<Vec<LayerGradient<T>>>;

    /// Stable digest of every parameter.
    fn parameter_hash(&self) -> String;
}

/// `ClassifierAdapter` backed by an in-process [`Network`].
#[derive(Debug, Clone)]
pub struct NetworkClassifier<T> {
    model_id: String,
    network: Network<T>,
    saliency_layer: String,
}

impl<T: Scalar> NetworkClassifier<T> {
    pub fn new(
        model_id: impl Into<String>,
        network: Network<T>,
        saliency_layer: impl Into<String>,
    ) -> Result<Self> {
        let saliency_layer = saliency_layer.into();
        network.activation_index(&saliency_layer)?;
        let out = network.output_shape();
        if out.height != 1 || out.width != 1 || out.channels < 2 {
            return Err(UapError::InvalidConfig(format!(
                "classifier output must be 1x1xM with M >= 2, got {out}"
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            network,
            saliency_layer,
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    pub fn into_network(self) -> Network<T> {
        self.network
    }

    fn check(&self, images: &ImageBatch<T>, labels: Option<&[usize]>) -> Result<()> {
        if images.shape() != self.network.input_shape() {
            return Err(UapError::shape(self.network.input_shape(), images.shape()));
        }
        if let Some(labels) = labels {
            if labels.len() != images.len() {
                return Err(UapError::shape(
                    format!("{} labels", images.len()),
                    labels.len(),
                ));
            }
            let m = self.num_classes();
            if let Some(&l) = labels.iter().find(|&&l| l >= m) {
                return Err(UapError::InvalidConfig(format!(
                    "label {l} out of range for {m} classes"
                )));
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ClassifierAdapter<T> for NetworkClassifier<T> {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn num_classes(&self) -> usize {
        self.network.output_shape().len()
    }

    fn input_shape(&self) -> ImageShape {
        self.network.input_shape()
    }

    fn saliency_layer(&self) -> &str {
        &self.saliency_layer
    }

    fn layer_names(&self) -> Vec<String> {
        self.network.layer_names()
    }

    fn scores(&self, images: &ImageBatch<T>) -> Result<Vec<T>> {
        self.check(images, None)?;
        let n = images.shape().len();
        let rows: Vec<Vec<T>> = images
            .as_slice()
            .par_chunks(n)
            .map(|x| self.network.forward(x))
            .collect();
        Ok(rows.concat())
    }

    fn input_gradient(
        &self,
        images: &ImageBatch<T>,
        labels: &[usize],
        loss: LossSpec,
    ) -> Result<InputGradient<T>> {
        self.check(images, Some(labels))?;
        let n = images.shape().len();
        let batch = T::lit(images.len() as f64);
        let per_image: Vec<(T, Vec<T>, Vec<T>)> = images
            .as_slice()
            .par_chunks(n)
            .zip(labels.par_iter())
            .map(|(x, &label)| {
                let acts = self.network.forward_trace(x);
                let scores = acts.last().unwrap();
                let probs = softmax(scores);
                let (value, grad_out) = match loss {
                    LossSpec::MeanCrossEntropy => {
                        let g = probs
                            .iter()
                            .enumerate()
                            .map(|(c, &p)| {
                                let y = if c == label { T::one() } else { T::zero() };
                                (p - y) / batch
                            })
                            .collect();
                        (nll(probs[label]), g)
                    }
                    LossSpec::ClassScore => {
                        let mut g = vec![T::zero(); scores.len()];
                        g[label] = T::one();
                        (scores[label], g)
                    }
                };
                let gx = self.network.backward(&acts, grad_out, 0, None);
                (value, gx, probs)
            })
            .collect();
        let mut total = T::zero();
        let mut gradient = Vec::with_capacity(images.as_slice().len());
        let mut probs = Vec::with_capacity(images.len() * self.num_classes());
        for (v, g, p) in per_image {
            total += v;
            gradient.extend(g);
            probs.extend(p);
        }
        let loss = match loss {
            LossSpec::MeanCrossEntropy => total / batch,
            LossSpec::ClassScore => total,
        };
        Ok(InputGradient {
            loss,
            gradient,
            probabilities: Probabilities {
                num_classes: self.num_classes(),
                data: probs,
            },
        })
    }

    fn activation_and_gradient(
        &self,
        images: &ImageBatch<T>,
        layer: &str,
        labels: &[usize],
    ) -> Result<Vec<LayerGradient<T>>> {
        self.check(images, Some(labels))?;
        let stop = self.network.activation_index(layer)?;
        let shape = self.network.activation_shape(stop);
        let n = images.shape().len();
        Ok(images
            .as_slice()
            .par_chunks(n)
            .zip(labels.par_iter())
            .map(|(x, &label)| {
                let mut acts = self.network.forward_trace(x);
                let score = acts.last().unwrap()[label];
                let mut g = vec![T::zero(); self.num_classes()];
                g[label] = T::one();
                let gradient = self.network.backward(&acts, g, stop, None);
                LayerGradient {
                    shape,
                    activation: acts.swap_remove(stop),
                    gradient,
                    score,
                }
            })
            .collect())
    }

    fn parameter_hash(&self) -> String {
        self.network.parameter_hash()
    }
}

/// Predicted labels, evaluated in batches of `batch_size`.
pub fn predict_labels<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    images: &ImageBatch<T>,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(images.len());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let m = target.num_classes();
        let scores = target.scores(&images.select(chunk))?;
        out.extend(scores.chunks_exact(m).map(argmax));
    }
    Ok(out)
}
