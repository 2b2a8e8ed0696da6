//! Encoder-decoder generator mapping a frozen Gaussian noise tensor to one
//! perturbation bounded by `epsilon`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Result, UapError};
use crate::nn::{Network, NetworkBuilder};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of encoder (and decoder) blocks. Zero leaves only the output
    /// head, which is the only option for images smaller than 2×2.
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::base_channels")]
    pub base_channels: usize,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    pub noise_seed: u64,
    pub init_seed: u64,
    pub image_shape: ImageShape,
}

mod defaults {
    pub fn depth() -> usize {
        3
    }
    pub fn base_channels() -> usize {
        32
    }
    pub fn epsilon() -> f64 {
        10.0
    }
}

impl GeneratorConfig {
    pub fn new(image_shape: ImageShape, noise_seed: u64, init_seed: u64) -> Self {
        Self {
            depth: defaults::depth(),
            base_channels: defaults::base_channels(),
            epsilon: defaults::epsilon(),
            noise_seed,
            init_seed,
            image_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize
            .checked_shl(self.depth as u32)
            .ok_or_else(|| UapError::InvalidConfig(format!("depth {} too large", self.depth)))?;
        let s = self.image_shape;
        if s.is_empty() {
            return Err(UapError::InvalidConfig(format!("empty image shape {s}")));
        }
        if !s.height.is_multiple_of(f) || !s.width.is_multiple_of(f) {
            return Err(UapError::InvalidConfig(format!(
                "image {}x{} is not divisible by 2^{} = {f}",
                s.height, s.width, self.depth
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(UapError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.base_channels == 0 {
            return Err(UapError::InvalidConfig("base_channels must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel<T> {
    network: Network<T>,
    config: GeneratorConfig,
}

/// Keeps the initial pre-bound activations small so training starts in the
/// linear region of tanh instead of at saturation.
const HEAD_GAIN: f64 = 0.01;

/// Builds the encoder-decoder with seeded initialization.
///
/// Encoder block: conv 3×3, ReLU, 2×2 max pool, doubling channels from
/// `base_channels`. Decoder block: 2× nearest upsample, conv 3×3, ReLU,
/// halving channels. A final 3×3 conv projects to the image channels and
/// `epsilon * tanh` bounds the output.
pub fn build_generator<T: Scalar>(config: &GeneratorConfig) -> Result<GeneratorModel<T>> {
    config.validate()?;
    let mut b = NetworkBuilder::new(config.image_shape, config.init_seed);
    for k in 0..config.depth {
        let ch = config.base_channels << k;
        b = b
            .conv(&format!("enc{}_conv", k + 1), ch)?
            .relu(&format!("enc{}_relu", k + 1))?
            .maxpool(&format!("enc{}_pool", k + 1))?;
    }
    for k in 0..config.depth {
        let ch = config.base_channels << (config.depth - 1 - k);
        b = b
            .upsample(&format!("dec{}_up", k + 1))?
            .conv(&format!("dec{}_conv", k + 1), ch)?
            .relu(&format!("dec{}_relu", k + 1))?;
    }
    let network = b
        .conv_with_gain("head", config.image_shape.channels, HEAD_GAIN)?
        .bounded_tanh("bound", config.epsilon)?
        .build()?;
    debug_assert_eq!(network.output_shape(), config.image_shape);
    Ok(GeneratorModel {
        network,
        config: config.clone(),
    })
}

/// i.i.d. standard normal tensor of the image shape, fully determined by `noise_seed`.
pub fn sample_noise<T: Scalar>(config: &GeneratorConfig) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    (0..config.image_shape.len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    config: GeneratorConfig,
    noise_seed: u64,
    init_seed: u64,
    epoch: usize,
    weights: PathBuf,
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn epsilon(&self) -> T {
        T::lit(self.config.epsilon)
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.network
    }

    pub fn forward(&self, z: &[T]) -> Result<Vec<T>> {
        self.network.check_input(z)?;
        Ok(self.network.forward(z))
    }

    /// Writes the weights to `path` and a `{config, seeds, epoch}` manifest
    /// next to it with a `.manifest.json` suffix.
    pub fn save_checkpoint(&self, path: &Path, epoch: usize) -> Result<()> {
        let weights = serde_json::to_vec(&self.network)?;
        fs::write(path, weights).map_err(|e| UapError::io(path, e))?;
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            noise_seed: self.config.noise_seed,
            init_seed: self.config.init_seed,
            epoch,
            weights: PathBuf::from(path.file_name().unwrap_or_default()),
        };
        let mpath = manifest_path(path);
        fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| UapError::io(&mpath, e))
    }

    /// Returns the model and the epoch recorded in its manifest.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, usize)> {
        let mpath = manifest_path(path);
        let text = fs::read(&mpath).map_err(|e| UapError::io(&mpath, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
        let bytes = fs::read(path).map_err(|e| UapError::io(path, e))?;
        let network: Network<T> = serde_json::from_slice::<Network<T>>(&bytes)?.validated()?;
        let template = build_generator::<T>(&manifest.config)?;
        if template.network.layer_names() != network.layer_names()
            || template.network.num_params() != network.num_params()
        {
            return Err(UapError::InvalidConfig(format!(
                "checkpoint {} does not match its manifest architecture",
                path.display()
            )));
        }
        Ok((
            Self {
                network,
                config: manifest.config,
            },
            manifest.epoch,
        ))
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize, hw: usize) -> GeneratorConfig {
        GeneratorConfig {
            depth,
            base_channels: 4,
            epsilon: 10.0,
            noise_seed: 5,
            init_seed: 6,
            image_shape: ImageShape::new(hw, hw, 3),
        }
    }

    #[test]
    fn shape_contract() {
        let g = build_generator::<f32>(&cfg(3, 64)).unwrap();
        let z = sample_noise(g.config());
        assert_eq!(g.forward(&z).unwrap().len(), 64 * 64 * 3);
        assert!(build_generator::<f32>(&GeneratorConfig {
            image_shape: ImageShape::new(63, 64, 3),
            ..cfg(3, 64)
        })
        .is_err());
        assert!(g.forward(&z[1..]).is_err());
    }

    #[test]
    fn seeded_builds_match() {
        let a = build_generator::<f32>(&cfg(2, 16)).unwrap();
        let b = build_generator::<f32>(&cfg(2, 16)).unwrap();
        assert_eq!(a.network().parameter_hash(), b.network().parameter_hash());
        assert_eq!(sample_noise::<f32>(a.config()), sample_noise::<f32>(b.config()));
    }

    #[test]
    fn noise_moments_match_reference_sampler() {
        let c = cfg(1, 64);
        let z: Vec<f64> = sample_noise(&c);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.05, "sd {sd}");

        // independent Box-Muller reference with the same sample count
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reference: Vec<f64> = (0..z.len())
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let rmean = reference.iter().sum::<f64>() / n;
        let rsd = (reference.iter().map(|v| (v - rmean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - rmean).abs() < 0.1 && (sd - rsd).abs() < 0.1);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut g = build_generator::<f64>(&cfg(1, 8)).unwrap();
        for p in g.network_mut().layer_params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = g.forward(&sample_noise(g.config())).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.json");
        let g = build_generator::<f32>(&cfg(1, 8)).unwrap();
        g.save_checkpoint(&path, 7).unwrap();
        let (back, epoch) = GeneratorModel::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(back.network().parameter_hash(), g.network().parameter_hash());
    }
}
