//! Images, perturbations and the pixel arithmetic shared by every stage.
//!
//! All tensors at module boundaries use a batch × height × width × channels
//! layout stored row-major in a flat `Vec`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UapError};
use crate::scalar::Scalar;

/// Closed interval of valid pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRange<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> PixelRange<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if !(lo < hi) {
            return Err(UapError::InvalidConfig(format!(
                "pixel range requires lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn clamp(&self, v: T) -> T {
        v.max(self.lo).min(self.hi)
    }

    #[inline]
    pub fn contains(&self, v: T) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn cast<U: Scalar>(&self) -> PixelRange<U> {
        PixelRange {
            lo: U::lit(self.lo.as_f64()),
            hi: U::lit(self.hi.as_f64()),
        }
    }
}

impl<T: Scalar> Default for PixelRange<T> {
    fn default() -> Self {
        Self {
            lo: T::zero(),
            hi: T::lit(255.0),
        }
    }
}

/// Height, width and channel count of a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A batch of images with an explicit pixel range. Every element lies inside `range`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    shape: ImageShape,
    data: Vec<T>,
    range: PixelRange<T>,
}

impl<T: Scalar> ImageBatch<T> {
    /// Builds a batch, rejecting data that is ragged or outside the pixel range.
    pub fn new(shape: ImageShape, data: Vec<T>, range: PixelRange<T>) -> Result<Self> {
        if shape.is_empty() || !data.len().is_multiple_of(shape.len()) {
            return Err(UapError::shape(
                format!("a multiple of {shape}"),
                format!("{} elements", data.len()),
            ));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, v)| !range.contains(**v)) {
            return Err(UapError::InvalidConfig(format!(
                "pixel {v} at index {index} outside [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(Self { shape, data, range })
    }

    pub fn empty(shape: ImageShape, range: PixelRange<T>) -> Self {
        Self {
            shape,
            data: Vec::new(),
            range,
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn range(&self) -> PixelRange<T> {
        self.range
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn image(&self, index: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn images(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.shape.len())
    }

    /// Copies the listed images, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            data,
            range: self.range,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            range: self.range.cast(),
        }
    }
}

/// Images paired with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub images: ImageBatch<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn new(images: ImageBatch<T>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(UapError::shape(
                format!("{} labels", images.len()),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps only the examples whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx)
    }
}

/// A labelled dataset with disjoint train and validation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub train: Split<T>,
    pub validation: Split<T>,
    pub class_names: Vec<String>,
    pub split_seed: u64,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(
        train: Split<T>,
        validation: Split<T>,
        class_names: Vec<String>,
        split_seed: u64,
    ) -> Result<Self> {
        if train.images.shape() != validation.images.shape() {
            return Err(UapError::shape(
                train.images.shape(),
                validation.images.shape(),
            ));
        }
        let m = class_names.len();
        if let Some(&bad) = train
            .labels
            .iter()
            .chain(&validation.labels)
            .find(|&&l| l >= m)
        {
            return Err(UapError::Dataset(format!(
                "label {bad} is not a valid index into {m} class names"
            )));
        }
        Ok(Self {
            train,
            validation,
            class_names,
            split_seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.train.images.shape()
    }
}

/// Pipeline stage a perturbation tensor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Mid,
    Fin,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Mid => "mid",
            Stage::Fin => "fin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(Stage::Raw),
            "mid" => Some(Stage::Mid),
            "fin" => Some(Stage::Fin),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image-shaped additive perturbation with its ∞-norm budget and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T> {
    pub delta: Vec<T>,
    pub shape: ImageShape,
    pub epsilon: T,
    pub stage: Stage,
    pub source_model_id: String,
    pub created_unix: u64,
}

impl<T: Scalar> Perturbation<T> {
    /// Validates shape and, for `mid`/`fin` stages, the budget `max |delta| <= epsilon`.
    pub fn new(
        delta: Vec<T>,
        shape: ImageShape,
        epsilon: T,
        stage: Stage,
        source_model_id: impl Into<String>,
    ) -> Result<Self> {
        if delta.len() != shape.len() {
            return Err(UapError::shape(shape, format!("{} elements", delta.len())));
        }
        check_finite(&delta)?;
        if stage != Stage::Raw {
            let worst = linf(&delta);
            if worst > epsilon {
                return Err(UapError::InvalidConfig(format!(
                    "{stage} perturbation has max |delta| = {worst} > epsilon {epsilon}"
                )));
            }
        }
        Ok(Self {
            delta,
            shape,
            epsilon,
            stage,
            source_model_id: source_model_id.into(),
            created_unix: 0,
        })
    }

    pub fn zeros(shape: ImageShape, epsilon: T) -> Self {
        Self {
            delta: vec![T::zero(); shape.len()],
            shape,
            epsilon,
            stage: Stage::Raw,
            source_model_id: String::new(),
            created_unix: 0,
        }
    }

    pub fn with_created_unix(mut self, created_unix: u64) -> Self {
        self.created_unix = created_unix;
        self
    }

    pub fn linf(&self) -> T {
        linf(&self.delta)
    }

    pub fn cast<U: Scalar>(&self) -> Perturbation<U> {
        Perturbation {
            delta: self.delta.iter().map(|v| U::lit(v.as_f64())).collect(),
            shape: self.shape,
            epsilon: U::lit(self.epsilon.as_f64()),
            stage: self.stage,
            source_model_id: self.source_model_id.clone(),
            created_unix: self.created_unix,
        }
    }
}

pub(crate) fn linf<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

pub(crate) fn check_finite<T: Scalar>(v: &[T]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(UapError::NonFinite {
            index,
            value: v[index].as_f64(),
        }),
        None => Ok(()),
    }
}

/// Clamps every element into `[-epsilon, epsilon]`.
pub fn project_to_ball<T: Scalar>(delta: &[T], epsilon: T) -> Result<Vec<T>> {
    if !(epsilon > T::zero()) {
        return Err(UapError::InvalidConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    check_finite(delta)?;
    Ok(delta.iter().map(|&v| v.max(-epsilon).min(epsilon)).collect())
}

/// Adds `p` to every image and clips the result into the batch pixel range.
pub fn apply_perturbation<T: Scalar>(
    images: &ImageBatch<T>,
    p: &Perturbation<T>,
) -> Result<ImageBatch<T>> {
    apply_delta(images, &p.delta, p.shape)
}

pub(crate) fn apply_delta<T: Scalar>(
    images: &ImageBatch<T>,
    delta: &[T],
    shape: ImageShape,
) -> Result<ImageBatch<T>> {
    if shape != images.shape() || delta.len() != shape.len() {
        return Err(UapError::shape(images.shape(), shape));
    }
    let range = images.range();
    let data = images
        .images()
        .flat_map(|img| img.iter().zip(delta).map(|(&x, &d)| range.clamp(x + d)))
        .collect();
    Ok(ImageBatch {
        shape: images.shape(),
        data,
        range,
    })
}

/// Mean over the batch of the per-image Euclidean distance between the two batches.
pub fn perturbation_l2<T: Scalar>(clean: &ImageBatch<T>, adversarial: &ImageBatch<T>) -> Result<f64> {
    if clean.shape() != adversarial.shape() || clean.len() != adversarial.len() {
        return Err(UapError::shape(
            format!("{} x {}", clean.len(), clean.shape()),
            format!("{} x {}", adversarial.len(), adversarial.shape()),
        ));
    }
    if clean.is_empty() {
        return Err(UapError::Empty("perturbation_l2 on an empty batch".into()));
    }
    let total: f64 = clean
        .images()
        .zip(adversarial.images())
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = (y - x).as_f64();
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / clean.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(values: &[f64], shape: ImageShape) -> ImageBatch<f64> {
        ImageBatch::new(shape, values.to_vec(), PixelRange::default()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let out = project_to_ball(&[15.0, -12.0, 3.5], 10.0).unwrap();
        assert_eq!(out, vec![10.0, -10.0, 3.5]);
    }

    #[test]
    fn projection_rejects_non_finite_and_names_index() {
        let err = project_to_ball(&[1.0, f64::NAN, 2.0], 10.0).unwrap_err();
        match err {
            UapError::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(project_to_ball(&[1.0f32], 0.0).is_err());
    }

    #[test]
    fn apply_examples() {
        let shape = ImageShape::new(1, 1, 3);
        let images = batch(&[250.0, 100.0, 0.0], shape);
        let p = Perturbation::new(vec![10.0, -10.0, 0.0], shape, 10.0, Stage::Mid, "m").unwrap();
        let adv = apply_perturbation(&images, &p).unwrap();
        assert_eq!(adv.as_slice(), &[255.0, 90.0, 0.0]);

        let zero = Perturbation::zeros(shape, 10.0);
        assert_eq!(apply_perturbation(&images, &zero).unwrap(), images);
    }

    #[test]
    fn apply_reports_both_shapes() {
        let images = batch(&[1.0; 4], ImageShape::new(2, 2, 1));
        let p = Perturbation::zeros(ImageShape::new(1, 1, 4), 1.0);
        let msg = apply_perturbation(&images, &p).unwrap_err().to_string();
        assert!(msg.contains("2x2x1") && msg.contains("1x1x4"), "{msg}");
    }

    #[test]
    fn l2_uniform_shift_matches_direct_sum() {
        let shape = ImageShape::new(256, 256, 3);
        let clean = ImageBatch::new(shape, vec![100.0f64; shape.len()], PixelRange::default())
            .unwrap();
        let adv = ImageBatch::new(shape, vec![110.0f64; shape.len()], PixelRange::default())
            .unwrap();
        let pm = perturbation_l2(&clean, &adv).unwrap();
        // direct summation oracle
        let mut acc = 0.0f64;
        for _ in 0..shape.len() {
            acc += 10.0 * 10.0;
        }
        assert!((pm - acc.sqrt()).abs() < 1e-9);
        assert!((pm - 10.0 * 196608f64.sqrt()).abs() < 1e-9);
        assert_eq!(perturbation_l2(&clean, &clean).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_budget_enforced_for_mid() {
        let shape = ImageShape::new(1, 1, 1);
        assert!(Perturbation::new(vec![11.0f32], shape, 10.0, Stage::Mid, "m").is_err());
        assert!(Perturbation::new(vec![11.0f32], shape, 10.0, Stage::Raw, "m").is_ok());
    }

    #[test]
    fn dataset_rejects_bad_label() {
        let shape = ImageShape::new(1, 1, 1);
        let s = Split::new(batch(&[1.0], shape), vec![3]).unwrap();
        assert!(LabeledDataset::new(s.clone(), s, vec!["a".into(), "b".into()], 0).is_err());
    }
}
