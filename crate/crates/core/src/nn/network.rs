use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{Layer, LayerKind};
use crate::data::ImageShape;
use crate::error::{Result, UapError};
use crate::scalar::Scalar;

/// Name that addresses the network input in activation lookups.
pub const INPUT_LAYER: &str = "input";

/// Feed-forward stack of named layers over single images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Network<T> {
    input_shape: ImageShape,
    layers: Vec<Layer<T>>,
    #[serde(skip)]
    shapes: Vec<ImageShape>,
}

/// Per-layer gradients, aligned with `Network::layers` (empty for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T>(pub Vec<Vec<T>>);

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self(
            net.layers
                .iter()
                .map(|l| vec![T::zero(); l.kind.params().len()])
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Euclidean norm over all parameters, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.0.iter().flatten()
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(input_shape: ImageShape, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shapes = vec![input_shape];
        let mut names = std::collections::HashSet::new();
        for layer in &layers {
            if layer.name == INPUT_LAYER || !names.insert(layer.name.clone()) {
                return Err(UapError::InvalidConfig(format!(
                    "duplicate or reserved layer name `{}`",
                    layer.name
                )));
            }
            let next = layer.kind.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    /// Recomputes cached shapes after deserialization.
    pub fn validated(self) -> Result<Self> {
        Network::new(self.input_shape, self.layers)
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn output_shape(&self) -> ImageShape {
        *self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Activation shape at position `i` (0 is the input, `i` is the output of layer `i - 1`).
    pub fn activation_shape(&self, i: usize) -> ImageShape {
        self.shapes[i]
    }

    pub fn layer_names(&self) -> Vec<String> {
        std::iter::once(INPUT_LAYER.to_owned())
            .chain(self.layers.iter().map(|l| l.name.clone()))
            .collect()
    }

    /// Activation position of the named layer's output.
    pub fn activation_index(&self, name: &str) -> Result<usize> {
        if name == INPUT_LAYER {
            return Ok(0);
        }
        self.layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| i + 1)
            .ok_or_else(|| UapError::UnknownLayer {
                name: name.to_owned(),
                available: self.layer_names(),
            })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.kind.params().len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.kind.params().iter())
    }

    pub fn layer_params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().map(|l| l.kind.params_mut())
    }

    /// Mutable access to the `index`-th parameter in flattened order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for layer in &mut self.layers {
            let p = layer.kind.params_mut();
            if index < p.len() {
                return Some(&mut p[index]);
            }
            index -= p.len();
        }
        None
    }

    pub fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_shape.len() {
            return Err(UapError::shape(
                self.input_shape,
                format!("{} elements", x.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        for (layer, &s) in self.layers.iter().zip(&self.shapes) {
            cur = layer.kind.forward(&cur, s);
        }
        cur
    }

    /// All activations, input first, output last.
    pub fn forward_trace(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (layer, &s) in self.layers.iter().zip(&self.shapes) {
            let next = layer.kind.forward(acts.last().unwrap(), s);
            acts.push(next);
        }
        acts
    }

    /// Back-propagates `grad_out` from the output down to activation `stop`,
    /// returning the gradient w.r.t. that activation. Parameter gradients of
    /// the traversed layers are accumulated into `pgrads` when given.
    pub fn backward(
        &self,
        acts: &[Vec<T>],
        grad_out: Vec<T>,
        stop: usize,
        mut pgrads: Option<&mut ParamGrads<T>>,
    ) -> Vec<T> {
        let mut g = grad_out;
        for i in (stop..self.layers.len()).rev() {
            let pg = pgrads.as_deref_mut().map(|p| p.0[i].as_mut_slice());
            g = self.layers[i].kind.backward(&acts[i], self.shapes[i], &g, pg);
        }
        g
    }

    /// SHA-256 over layer names, kinds and parameter bit patterns.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.input_shape).as_bytes());
        for layer in &self.layers {
            h.update(layer.name.as_bytes());
            let tag = match &layer.kind {
                LayerKind::Affine { scale, shift } => format!("affine:{scale}:{shift}"),
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                    ..
                } => format!("conv:{in_channels}:{out_channels}"),
                LayerKind::Relu => "relu".into(),
                LayerKind::MaxPool2 => "maxpool2".into(),
                LayerKind::Upsample2 => "upsample2".into(),
                LayerKind::GlobalAvgPool => "gap".into(),
                LayerKind::Dense {
                    inputs, outputs, ..
                } => format!("dense:{inputs}:{outputs}"),
                LayerKind::BoundedTanh { bound } => format!("tanh:{bound}"),
            };
            h.update(tag.as_bytes());
            for p in layer.kind.params() {
                h.update(p.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                kind: match &l.kind {
                    LayerKind::Affine { scale, shift } => LayerKind::Affine {
                        scale: U::lit(scale.as_f64()),
                        shift: U::lit(shift.as_f64()),
                    },
                    LayerKind::Conv3x3 {
                        in_channels,
                        out_channels,
                        params,
                    } => LayerKind::Conv3x3 {
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        params: conv(params),
                    },
                    LayerKind::Relu => LayerKind::Relu,
                    LayerKind::MaxPool2 => LayerKind::MaxPool2,
                    LayerKind::Upsample2 => LayerKind::Upsample2,
                    LayerKind::GlobalAvgPool => LayerKind::GlobalAvgPool,
                    LayerKind::Dense {
                        inputs,
                        outputs,
                        params,
                    } => LayerKind::Dense {
                        inputs: *inputs,
                        outputs: *outputs,
                        params: conv(params),
                    },
                    LayerKind::BoundedTanh { bound } => LayerKind::BoundedTanh {
                        bound: U::lit(bound.as_f64()),
                    },
                },
            })
            .collect();
        Network {
            input_shape: self.input_shape,
            layers,
            shapes: self.shapes.clone(),
        }
    }
}

/// Incrementally assembles a network with He-normal weights from a seeded generator.
pub struct NetworkBuilder<T> {
    input_shape: ImageShape,
    current: ImageShape,
    layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> NetworkBuilder<T> {
    pub fn new(input_shape: ImageShape, seed: u64) -> Self {
        Self {
            input_shape,
            current: input_shape,
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn current_shape(&self) -> ImageShape {
        self.current
    }

    fn push(mut self, name: impl Into<String>, kind: LayerKind<T>) -> Result<Self> {
        self.current = kind.output_shape(self.current)?;
        self.layers.push(Layer {
            name: name.into(),
            kind,
        });
        Ok(self)
    }

    fn he_normal(&mut self, fan_in: usize, n: usize) -> Vec<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        (0..n).map(|_| T::lit(normal.sample(&mut self.rng))).collect()
    }

    pub fn affine(self, name: &str, scale: f64, shift: f64) -> Result<Self> {
        self.push(
            name,
            LayerKind::Affine {
                scale: T::lit(scale),
                shift: T::lit(shift),
            },
        )
    }

    pub fn conv(self, name: &str, out_channels: usize) -> Result<Self> {
        self.conv_with_gain(name, out_channels, 1.0)
    }

    /// 3×3 convolution whose He-normal weights are multiplied by `gain`.
    pub fn conv_with_gain(mut self, name: &str, out_channels: usize, gain: f64) -> Result<Self> {
        let cin = self.current.channels;
        let g = T::lit(gain);
        let mut params: Vec<T> = self
            .he_normal(9 * cin, 9 * cin * out_channels)
            .into_iter()
            .map(|w| w * g)
            .collect();
        params.extend(std::iter::repeat_n(T::zero(), out_channels));
        self.push(
            name,
            LayerKind::Conv3x3 {
                in_channels: cin,
                out_channels,
                params,
            },
        )
    }

    pub fn relu(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::Relu)
    }

    pub fn maxpool(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::MaxPool2)
    }

    pub fn upsample(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::Upsample2)
    }

    pub fn global_avg_pool(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::GlobalAvgPool)
    }

    pub fn dense(mut self, name: &str, outputs: usize) -> Result<Self> {
        let inputs = self.current.len();
        let mut params = self.he_normal(inputs, inputs * outputs);
        params.extend(std::iter::repeat_n(T::zero(), outputs));
        self.push(
            name,
            LayerKind::Dense {
                inputs,
                outputs,
                params,
            },
        )
    }

    pub fn bounded_tanh(self, name: &str, bound: f64) -> Result<Self> {
        self.push(
            name,
            LayerKind::BoundedTanh {
                bound: T::lit(bound),
            },
        )
    }

    pub fn build(self) -> Result<Network<T>> {
        Network::new(self.input_shape, self.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> Network<f64> {
        NetworkBuilder::new(ImageShape::new(4, 4, 2), seed)
            .affine("norm", 0.5, -1.0)
            .unwrap()
            .conv("conv1", 3)
            .unwrap()
            .relu("relu1")
            .unwrap()
            .maxpool("pool1")
            .unwrap()
            .upsample("up1")
            .unwrap()
            .conv("conv2", 2)
            .unwrap()
            .global_avg_pool("gap")
            .unwrap()
            .dense("fc", 3)
            .unwrap()
            .bounded_tanh("head", 2.0)
            .unwrap()
            .build()
            .unwrap()
    }

    fn loss(net: &Network<f64>, x: &[f64]) -> f64 {
        net.forward(x)
            .iter()
            .enumerate()
            .map(|(i, v)| (i as f64 + 1.0) * v)
            .sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut net = toy(3);
        let x: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
        let acts = net.forward_trace(&x);
        let mut pg = ParamGrads::zeros_like(&net);
        let gout: Vec<f64> = (0..3).map(|i| i as f64 + 1.0).collect();
        let gx = net.backward(&acts, gout, 0, Some(&mut pg));
        let flat: Vec<f64> = pg.iter().copied().collect();
        let h = 1e-5;
        for idx in (0..net.num_params()).step_by(7) {
            let orig = *net.param_mut(idx).unwrap();
            *net.param_mut(idx).unwrap() = orig + h;
            let up = loss(&net, &x);
            *net.param_mut(idx).unwrap() = orig - h;
            let down = loss(&net, &x);
            *net.param_mut(idx).unwrap() = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - flat[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", flat[idx]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }

    #[test]
    fn seeded_builds_are_identical_and_serialize() {
        let a = toy(9);
        let b = toy(9);
        assert_eq!(a.parameter_hash(), b.parameter_hash());
        assert_ne!(a.parameter_hash(), toy(10).parameter_hash());
        let json = serde_json::to_string(&a).unwrap();
        let back: Network<f64> = serde_json::from_str::<Network<f64>>(&json)
            .unwrap()
            .validated()
            .unwrap();
        assert_eq!(back.parameter_hash(), a.parameter_hash());
    }

    #[test]
    fn unknown_layer_lists_available() {
        let err = toy(1).activation_index("conv9").unwrap_err().to_string();
        assert!(err.contains("conv1") && err.contains("input"), "{err}");
    }
}
