//! Target classifiers: built-in desk-scale architectures, external weight
//! files, and a JSON manifest of everything registered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{softmax, NetworkClassifier};
use crate::data::{ImageShape, LabeledDataset, Split};
use crate::error::{Result, UapError};
use crate::eval::clean_accuracy;
use crate::nn::{Network, NetworkBuilder, Optimizer, OptimizerKind, ParamGrads};
use crate::scalar::Scalar;
use crate::trainer::nll;

pub const MANIFEST_FILE: &str = "registry.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ToyLinear,
    SmallCnn,
    External,
}

impl Architecture {
    fn default_saliency_layer(self) -> Option<&'static str> {
        match self {
            Architecture::ToyLinear => Some("normalize"),
            Architecture::SmallCnn => Some("conv3"),
            Architecture::External => None,
        }
    }
}

/// Optimization recipe for built-in architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierRecipe {
    #[serde(default = "recipe::epochs")]
    pub epochs: usize,
    #[serde(default = "recipe::batch_size")]
    pub batch_size: usize,
    #[serde(default = "recipe::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "recipe::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "recipe::optimizer")]
    pub optimizer: OptimizerKind,
}

mod recipe {
    use crate::nn::OptimizerKind;
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        0.002
    }
    pub fn weight_decay() -> f64 {
        0.001
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
}

impl Default for ClassifierRecipe {
    fn default() -> Self {
        Self {
            epochs: recipe::epochs(),
            batch_size: recipe::batch_size(),
            learning_rate: recipe::learning_rate(),
            weight_decay: recipe::weight_decay(),
            optimizer: recipe::optimizer(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: String,
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input_shape: ImageShape,
    /// Defaults to the architecture's last convolution (`normalize` for toy_linear).
    #[serde(default)]
    pub saliency_layer: Option<String>,
    /// Required for `external`.
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Channel width of the first small_cnn block.
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub training: ClassifierRecipe,
}

pub const DEFAULT_CNN_WIDTH: usize = 8;

impl ModelSpec {
    pub fn toy_linear(model_id: &str, num_classes: usize, input_shape: ImageShape, seed: u64) -> Self {
        Self {
            model_id: model_id.to_owned(),
            architecture: Architecture::ToyLinear,
            num_classes,
            input_shape,
            saliency_layer: None,
            weights_path: None,
            width: None,
            seed,
            training: ClassifierRecipe {
                epochs: 100,
                learning_rate: 0.05,
                ..ClassifierRecipe::default()
            },
        }
    }

    pub fn small_cnn(
        model_id: &str,
        num_classes: usize,
        input_shape: ImageShape,
        width: usize,
        seed: u64,
    ) -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            width: Some(width),
            training: ClassifierRecipe::default(),
            ..Self::toy_linear(model_id, num_classes, input_shape, seed)
        }
    }

    /// The configured saliency layer, or the architecture default. External
    /// networks default to the last layer that still has spatial extent.
    pub fn resolved_saliency_layer<T: Scalar>(&self, net: &Network<T>) -> String {
        if let Some(l) = &self.saliency_layer {
            return l.clone();
        }
        match self.architecture.default_saliency_layer() {
            Some(l) => l.to_owned(),
            None => (0..net.layers().len())
                .rev()
                .find(|&i| net.activation_shape(i + 1).pixels() > 1)
                .map(|i| net.layers()[i].name.clone())
                .unwrap_or_else(|| net.layers()[0].name.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(UapError::InvalidConfig("empty model_id".into()));
        }
        if self.num_classes < 2 {
            return Err(UapError::InvalidConfig("num_classes must be >= 2".into()));
        }
        match self.architecture {
            Architecture::External if self.weights_path.is_none() => Err(UapError::InvalidConfig(
                format!("external model `{}` requires weights_path", self.model_id),
            )),
            Architecture::SmallCnn
                if !self.input_shape.height.is_multiple_of(8) || !self.input_shape.width.is_multiple_of(8) =>
            {
                Err(UapError::InvalidConfig(format!(
                    "small_cnn needs height and width divisible by 8, got {}",
                    self.input_shape
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Freshly initialized network for a built-in architecture.
pub fn build_network<T: Scalar>(spec: &ModelSpec) -> Result<Network<T>> {
    spec.validate()?;
    let b = NetworkBuilder::new(spec.input_shape, spec.seed).affine("normalize", 1.0 / 127.5, -1.0)?;
    match spec.architecture {
        Architecture::ToyLinear => b.dense("logits", spec.num_classes)?.build(),
        Architecture::SmallCnn => {
            let w = spec.width.unwrap_or(DEFAULT_CNN_WIDTH);
            b.conv("conv1", w)?
                .relu("relu1")?
                .maxpool("pool1")?
                .conv("conv2", 2 * w)?
                .relu("relu2")?
                .maxpool("pool2")?
                .conv("conv3", 2 * w)?
                .relu("relu3")?
                .maxpool("pool3")?
                .dense("logits", spec.num_classes)?
                .build()
        }
        Architecture::External => Err(UapError::InvalidConfig(
            "external models are loaded, not built".into(),
        )),
    }
}

/// Images per deterministic gradient sub-batch; partial sums are added in order.
const GRAD_CHUNK: usize = 8;

fn batch_gradient<T: Scalar>(net: &Network<T>, batch: &Split<T>) -> (T, ParamGrads<T>) {
    let n = batch.images.shape().len();
    let scale = T::lit(batch.len() as f64);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let partial: Vec<(T, ParamGrads<T>)> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = ParamGrads::zeros_like(net);
            let mut loss = T::zero();
            for &i in chunk {
                let x = &batch.images.as_slice()[i * n..(i + 1) * n];
                let label = batch.labels[i];
                let acts = net.forward_trace(x);
                let probs = softmax(acts.last().unwrap());
                loss += nll(probs[label]);
                let g: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| (p - if c == label { T::one() } else { T::zero() }) / scale)
                    .collect();
                net.backward(&acts, g, 0, Some(&mut grads));
            }
            (loss, grads)
        })
        .collect();
    let mut total = ParamGrads::zeros_like(net);
    let mut loss = T::zero();
    for (l, g) in &partial {
        loss += *l;
        total.add_assign(g);
    }
    (loss / scale, total)
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier<T> {
    pub classifier: NetworkClassifier<T>,
    pub clean_accuracy: f64,
}

/// Trains a built-in architecture on the train split (seeded by `spec.seed`)
/// and reports clean accuracy on the validation split.
pub fn train_classifier<T: Scalar>(
    spec: &ModelSpec,
    data: &LabeledDataset<T>,
) -> Result<TrainedClassifier<T>> {
    if spec.architecture == Architecture::External {
        return Err(UapError::InvalidConfig(format!(
            "`{}` is external; use load_external",
            spec.model_id
        )));
    }
    if data.image_shape() != spec.input_shape || data.num_classes() != spec.num_classes {
        return Err(UapError::shape(
            format!("{} with {} classes", spec.input_shape, spec.num_classes),
            format!("{} with {} classes", data.image_shape(), data.num_classes()),
        ));
    }
    if data.train.is_empty() {
        return Err(UapError::Empty("training split".into()));
    }
    let r = &spec.training;
    let mut net = build_network::<T>(spec)?;
    let mut opt = Optimizer::new(r.optimizer, r.learning_rate, r.weight_decay, &net);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=r.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(r.batch_size.max(1)) {
            let (loss, grads) = batch_gradient(&net, &data.train.select(chunk));
            total += loss.as_f64() * chunk.len() as f64;
            opt.step(&mut net, &grads);
        }
        log::info!(
            "{} epoch {epoch}/{}: loss {:.4}",
            spec.model_id,
            r.epochs,
            total / data.train.len() as f64
        );
    }
    let layer = spec.resolved_saliency_layer(&net);
    let classifier = NetworkClassifier::new(&spec.model_id, net, layer)?;
    let eval_split = if data.validation.is_empty() {
        &data.train
    } else {
        &data.validation
    };
    let clean_accuracy = clean_accuracy(&classifier, eval_split, 64)?;
    Ok(TrainedClassifier {
        classifier,
        clean_accuracy,
    })
}

/// Loads an externally supplied weight file and checks it against `spec`.
pub fn load_external<T: Scalar>(spec: &ModelSpec) -> Result<NetworkClassifier<T>> {
    spec.validate()?;
    let path = spec
        .weights_path
        .as_ref()
        .ok_or_else(|| UapError::InvalidConfig("missing weights_path".into()))?;
    let net = read_weights::<T>(path)?;
    if net.input_shape() != spec.input_shape {
        return Err(UapError::shape(spec.input_shape, net.input_shape()));
    }
    if net.output_shape().len() != spec.num_classes {
        return Err(UapError::shape(
            format!("{} classes", spec.num_classes),
            net.output_shape(),
        ));
    }
    let layer = spec.resolved_saliency_layer(&net);
    NetworkClassifier::new(&spec.model_id, net, layer)
}

pub fn read_weights<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let bytes = fs::read(path).map_err(|e| UapError::io(path, e))?;
    serde_json::from_slice::<Network<T>>(&bytes)?.validated()
}

pub fn write_weights<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    fs::write(path, serde_json::to_vec(net)?).map_err(|e| UapError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub spec: ModelSpec,
    pub clean_accuracy: Option<f64>,
    pub parameter_hash: String,
    /// Relative to the registry root for built-in models.
    pub weights_file: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub models: BTreeMap<String, RegistryEntry>,
}

/// Directory of weight files plus `registry.json`.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
    manifest: RegistryManifest,
}

impl Registry {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let bytes = fs::read(&path).map_err(|e| UapError::io(&path, e))?;
            serde_json::from_slice(&bytes)?
        } else {
            RegistryManifest::default()
        };
        Ok(Self {
            root: root.to_owned(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RegistryManifest {
        &self.manifest
    }

    pub fn entry(&self, model_id: &str) -> Result<&RegistryEntry> {
        self.manifest
            .models
            .get(model_id)
            .ok_or_else(|| UapError::UnknownModel(model_id.to_owned()))
    }

    fn save_manifest(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| UapError::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)
            .map_err(|e| UapError::io(&path, e))
    }

    /// Stores a trained built-in model's weights and records it in the manifest.
    pub fn register<T: Scalar>(
        &mut self,
        spec: &ModelSpec,
        classifier: &NetworkClassifier<T>,
        clean_accuracy: Option<f64>,
    ) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| UapError::io(&self.root, e))?;
        let weights_file = PathBuf::from(format!("{}.weights.json", spec.model_id));
        write_weights(&self.root.join(&weights_file), classifier.network())?;
        self.manifest.models.insert(
            spec.model_id.clone(),
            RegistryEntry {
                spec: spec.clone(),
                clean_accuracy,
                parameter_hash: crate::classifier::ClassifierAdapter::parameter_hash(classifier),
                weights_file,
            },
        );
        self.save_manifest()
    }

    /// Validates and records an external model without copying its weights.
    pub fn register_external<T: Scalar>(&mut self, spec: &ModelSpec) -> Result<NetworkClassifier<T>> {
        let classifier = load_external::<T>(spec)?;
        self.manifest.models.insert(
            spec.model_id.clone(),
            RegistryEntry {
                spec: spec.clone(),
                clean_accuracy: None,
                parameter_hash: crate::classifier::ClassifierAdapter::parameter_hash(&classifier),
                weights_file: spec.weights_path.clone().unwrap_or_default(),
            },
        );
        self.save_manifest()?;
        Ok(classifier)
    }

    pub fn set_clean_accuracy(&mut self, model_id: &str, acc: f64) -> Result<()> {
        self.manifest
            .models
            .get_mut(model_id)
            .ok_or_else(|| UapError::UnknownModel(model_id.to_owned()))?
            .clean_accuracy = Some(acc);
        self.save_manifest()
    }

    pub fn load<T: Scalar>(&self, model_id: &str) -> Result<NetworkClassifier<T>> {
        let entry = self.entry(model_id)?;
        let path = if entry.weights_file.is_absolute() {
            entry.weights_file.clone()
        } else {
            self.root.join(&entry.weights_file)
        };
        let spec = ModelSpec {
            weights_path: Some(path),
            saliency_layer: entry.spec.saliency_layer.clone().or_else(|| {
                entry.spec.architecture.default_saliency_layer().map(str::to_owned)
            }),
            ..entry.spec.clone()
        };
        load_external(&ModelSpec {
            architecture: Architecture::External,
            ..spec
        })
        .inspect(|c| {
            if c.network().parameter_hash() != entry.parameter_hash {
                log::warn!("weights of `{model_id}` differ from the registered hash");
            }
        })
    }
}
