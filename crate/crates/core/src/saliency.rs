//! Gradient-weighted class activation maps, binarization and aggregation into
//! the weighted attention image.

use std::path::Path;

use crate::classifier::{ClassifierAdapter, LayerGradient};
use crate::data::{ImageBatch, Split};
use crate::error::{Result, UapError};
use crate::scalar::Scalar;

/// Default binarization cut, relative to each map's maximum.
pub const DEFAULT_BINARIZE_FRACTION: f64 = 0.5;

/// Row-major `height × width` map with values in `[0, 1]` and a maximum of
/// exactly 1 unless the map is all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    pub image_id: String,
    pub layer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

/// Per-pixel count of binarized saliency hits over `num_sources` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAttentionImage<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    pub num_sources: usize,
}

impl<T: Scalar> WeightedAttentionImage<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>, num_sources: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(UapError::shape(
                format!("{height}x{width}"),
                format!("{} values", values.len()),
            ));
        }
        let cap = T::lit(num_sources as f64);
        if let Some(v) = values
            .iter()
            .find(|&&v| !(v >= T::zero() && v <= cap))
        {
            return Err(UapError::InvalidConfig(format!(
                "attention value {v} outside [0, {num_sources}]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            num_sources,
        })
    }

    /// Writes an 8-bit grayscale PNG scaled so `num_sources` maps to 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let scale = 255.0 / self.num_sources.max(1) as f64;
        let pixels: Vec<u8> = self
            .values
            .iter()
            .map(|v| (v.as_f64() * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|source| UapError::Image {
                path: path.to_owned(),
                source,
            })
    }
}

/// Builds the saliency map from a layer activation and the class-score gradient.
pub fn saliency_from_layer<T: Scalar>(
    lg: &LayerGradient<T>,
    height: usize,
    width: usize,
    image_id: &str,
    layer: &str,
) -> SaliencyMap<T> {
    let s = lg.shape;
    let c = s.channels;
    let n = T::lit(s.pixels() as f64);
    let mut weights = vec![T::zero(); c];
    for px in lg.gradient.chunks_exact(c) {
        for (w, &g) in weights.iter_mut().zip(px) {
            *w += g;
        }
    }
    weights.iter_mut().for_each(|w| *w /= n);

    let cam: Vec<T> = lg
        .activation
        .chunks_exact(c)
        .map(|a| {
            a.iter()
                .zip(&weights)
                .fold(T::zero(), |acc, (&x, &w)| acc + x * w)
                .max(T::zero())
        })
        .collect();
    let mut values = bilinear_resize(&cam, s.height, s.width, height, width);
    let max = values.iter().fold(T::zero(), |m, &v| m.max(v));
    if max > T::zero() {
        for v in &mut values {
            *v = (*v / max).min(T::one());
        }
    }
    SaliencyMap {
        height,
        width,
        values,
        image_id: image_id.to_owned(),
        layer: layer.to_owned(),
    }
}

/// Half-pixel-centred bilinear resize of a single-channel map.
pub fn bilinear_resize<T: Scalar>(
    src: &[T],
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
) -> Vec<T> {
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let axis = |d: usize, s: usize, dst: usize| -> (usize, usize, T) {
        let pos = ((d as f64 + 0.5) * s as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, T::lit(pos - i0 as f64))
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = axis(x, sw, dw);
            let top = src[y0 * sw + x0] * (T::one() - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (T::one() - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    out
}

/// Saliency of `image` (a batch of one) for `label` at the target's saliency layer.
pub fn compute_saliency<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    image: &ImageBatch<T>,
    label: usize,
    image_id: &str,
) -> Result<SaliencyMap<T>> {
    compute_saliency_at(target, image, label, image_id, target.saliency_layer())
}

pub fn compute_saliency_at<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    image: &ImageBatch<T>,
    label: usize,
    image_id: &str,
    layer: &str,
) -> Result<SaliencyMap<T>> {
    if image.len() != 1 {
        return Err(UapError::shape("a batch of one image", image.len()));
    }
    let lg = target.activation_and_gradient(image, layer, &[label])?;
    let s = image.shape();
    Ok(saliency_from_layer(&lg[0], s.height, s.width, image_id, layer))
}

/// `1` where the value reaches `fraction * max` (inclusive); an all-zero map stays zero.
pub fn binarize<T: Scalar>(map: &SaliencyMap<T>, fraction: f64) -> Result<BinaryMap> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(UapError::InvalidConfig(format!(
            "binarize fraction must be in (0, 1), got {fraction}"
        )));
    }
    let max = map.values.iter().fold(T::zero(), |m, &v| m.max(v));
    let values = if max > T::zero() {
        let cut = T::lit(fraction) * max;
        map.values.iter().map(|&v| u8::from(v >= cut)).collect()
    } else {
        vec![0; map.values.len()]
    };
    Ok(BinaryMap {
        height: map.height,
        width: map.width,
        values,
    })
}

/// Elementwise sum of binary maps.
pub fn aggregate<T: Scalar>(maps: &[BinaryMap]) -> Result<WeightedAttentionImage<T>> {
    let first = maps
        .first()
        .ok_or_else(|| UapError::Empty("aggregate needs at least one map".into()))?;
    let mut counts = vec![0u32; first.values.len()];
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(UapError::shape(
                format!("{}x{}", first.height, first.width),
                format!("{}x{}", m.height, m.width),
            ));
        }
        for (c, &v) in counts.iter_mut().zip(&m.values) {
            *c += v as u32;
        }
    }
    WeightedAttentionImage::new(
        first.height,
        first.width,
        counts.into_iter().map(|c| T::lit(c as f64)).collect(),
        maps.len(),
    )
}

/// Saliency of every clean image in `split` with its true label, binarized and summed.
pub fn attention_image<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    split: &Split<T>,
    layer: Option<&str>,
    fraction: f64,
) -> Result<WeightedAttentionImage<T>> {
    if split.is_empty() {
        return Err(UapError::Empty("saliency split".into()));
    }
    let layer = layer.unwrap_or(target.saliency_layer());
    let s = split.images.shape();
    let lgs = target.activation_and_gradient(&split.images, layer, &split.labels)?;
    let maps = lgs
        .iter()
        .enumerate()
        .map(|(i, lg)| {
            let map = saliency_from_layer(lg, s.height, s.width, &i.to_string(), layer);
            binarize(&map, fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&maps)
}
