//! Folder-per-class dataset ingestion, seeded splits, and a procedural desk dataset.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, ImageShape, LabeledDataset, PixelRange, Split};
use crate::error::{Result, UapError};
use crate::scalar::Scalar;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitOptions {
    pub split_seed: u64,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    /// Keep at most this many validation images (sampled with `validation_seed`).
    #[serde(default)]
    pub validation_cap: Option<usize>,
    #[serde(default)]
    pub validation_seed: u64,
}

fn default_train_per_class() -> usize {
    50
}

impl SplitOptions {
    pub fn new(split_seed: u64, train_per_class: usize) -> Self {
        Self {
            split_seed,
            train_per_class,
            validation_cap: None,
            validation_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFiles {
    pub name: String,
    /// Paths relative to the manifest root.
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub image_shape: ImageShape,
    pub class_names: Vec<String>,
    pub classes: Vec<ClassFiles>,
    pub split: SplitOptions,
}

fn list_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| UapError::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| UapError::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans `root` (one subdirectory per class, lexicographic class order) and splits it.
pub fn ingest(root: &Path, options: &SplitOptions) -> Result<DatasetManifest> {
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for dir in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let imgs: Vec<String> = list_dir(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .map(|p| format!("{name}/{}", p.file_name().unwrap().to_string_lossy()))
            .collect();
        if imgs.is_empty() {
            return Err(UapError::Dataset(format!("class folder `{name}` has no images")));
        }
        class_names.push(name);
        files.push(imgs);
    }
    if class_names.len() < 2 {
        return Err(UapError::Dataset(format!(
            "{} needs at least two class folders",
            root.display()
        )));
    }

    let dims: Vec<(String, (u32, u32))> = files
        .par_iter()
        .flatten()
        .map(|rel| {
            let path = root.join(rel);
            image::image_dimensions(&path)
                .map(|d| (rel.clone(), d))
                .map_err(|source| UapError::Image { path, source })
        })
        .collect::<Result<_>>()?;
    let mut by_size: BTreeMap<(u32, u32), Vec<&str>> = BTreeMap::new();
    for (rel, d) in &dims {
        by_size.entry(*d).or_default().push(rel);
    }
    if by_size.len() > 1 {
        let (&common, _) = by_size.iter().max_by_key(|(_, v)| v.len()).unwrap();
        let offenders: Vec<String> = dims
            .iter()
            .filter(|(_, d)| *d != common)
            .map(|(rel, (w, h))| format!("{rel} ({w}x{h})"))
            .collect();
        return Err(UapError::Dataset(format!(
            "mixed image sizes; expected {}x{}, offenders: {}",
            common.0,
            common.1,
            offenders.join(", ")
        )));
    }
    let (w, h) = dims[0].1;
    split_files(
        root.to_owned(),
        ImageShape::new(h as usize, w as usize, 3),
        class_names,
        files,
        options,
    )
}

fn split_files(
    root: PathBuf,
    image_shape: ImageShape,
    class_names: Vec<String>,
    files: Vec<Vec<String>>,
    options: &SplitOptions,
) -> Result<DatasetManifest> {
    if options.train_per_class == 0 {
        return Err(UapError::InvalidConfig("train_per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.split_seed);
    let mut classes = Vec::with_capacity(files.len());
    for (name, mut list) in class_names.iter().cloned().zip(files) {
        if options.train_per_class > list.len() {
            return Err(UapError::Dataset(format!(
                "class `{name}` has {} images, fewer than train_per_class = {}",
                list.len(),
                options.train_per_class
            )));
        }
        list.sort();
        list.shuffle(&mut rng);
        let mut validation = list.split_off(options.train_per_class);
        list.sort();
        validation.sort();
        classes.push(ClassFiles {
            name,
            train: list,
            validation,
        });
    }
    if let Some(cap) = options.validation_cap {
        let all: Vec<(usize, String)> = classes
            .iter()
            .enumerate()
            .flat_map(|(c, f)| f.validation.iter().map(move |v| (c, v.clone())))
            .collect();
        if cap < all.len() {
            let mut vrng = ChaCha8Rng::seed_from_u64(options.validation_seed);
            let mut keep = index::sample(&mut vrng, all.len(), cap).into_vec();
            keep.sort_unstable();
            classes.iter_mut().for_each(|c| c.validation.clear());
            for i in keep {
                let (c, ref f) = all[i];
                classes[c].validation.push(f.clone());
            }
        }
    }
    Ok(DatasetManifest {
        root,
        image_shape,
        class_names,
        classes,
        split: options.clone(),
    })
}

impl DatasetManifest {
    /// Recomputes the split from the same file list with new options.
    pub fn resplit(&self, options: &SplitOptions) -> Result<Self> {
        let files = self
            .classes
            .iter()
            .map(|c| c.train.iter().chain(&c.validation).cloned().collect())
            .collect();
        split_files(
            self.root.clone(),
            self.image_shape,
            self.class_names.clone(),
            files,
            options,
        )
    }

    pub fn train_len(&self) -> usize {
        self.classes.iter().map(|c| c.train.len()).sum()
    }

    pub fn validation_len(&self) -> usize {
        self.classes.iter().map(|c| c.validation.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| UapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| UapError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn decode_split<T: Scalar>(&self, pick: impl Fn(&ClassFiles) -> &Vec<String>) -> Result<Split<T>> {
        let items: Vec<(usize, &String)> = self
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, f)| pick(f).iter().map(move |p| (c, p)))
            .collect();
        let decoded: Vec<Vec<T>> = items
            .par_iter()
            .map(|(_, rel)| {
                let path = self.root.join(rel);
                let img = image::open(&path)
                    .map_err(|source| UapError::Image {
                        path: path.clone(),
                        source,
                    })?
                    .to_rgb8();
                if (img.height() as usize, img.width() as usize)
                    != (self.image_shape.height, self.image_shape.width)
                {
                    return Err(UapError::Dataset(format!(
                        "{} is {}x{}, expected {}",
                        path.display(),
                        img.width(),
                        img.height(),
                        self.image_shape
                    )));
                }
                Ok(img.into_raw().into_iter().map(|v| T::lit(v as f64)).collect())
            })
            .collect::<Result<_>>()?;
        let images = ImageBatch::new(self.image_shape, decoded.concat(), PixelRange::default())?;
        Split::new(images, items.iter().map(|(c, _)| *c).collect())
    }

    /// Decodes every listed image into `[0, 255]` float pixels.
    pub fn load_dataset<T: Scalar>(&self) -> Result<LabeledDataset<T>> {
        LabeledDataset::new(
            self.decode_split(|c| &c.train)?,
            self.decode_split(|c| &c.validation)?,
            self.class_names.clone(),
            self.split.split_seed,
        )
    }
}

/// Parameters of the procedural desk dataset: oriented colour gratings inside a
/// jittered soft disk over a cluttered background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "synth::classes")]
    pub classes: usize,
    #[serde(default = "synth::per_class")]
    pub per_class: usize,
    #[serde(default = "synth::size")]
    pub size: usize,
    /// Grating amplitude in pixel units.
    #[serde(default = "synth::amplitude")]
    pub amplitude: f64,
    /// Standard deviation of i.i.d. pixel noise.
    #[serde(default = "synth::noise")]
    pub noise: f64,
    /// Disk radius as a fraction of the image size.
    #[serde(default = "synth::radius")]
    pub radius: f64,
    /// Maximum centre offset as a fraction of the image size.
    #[serde(default = "synth::jitter")]
    pub jitter: f64,
    pub seed: u64,
}

mod synth {
    pub fn classes() -> usize {
        10
    }
    pub fn per_class() -> usize {
        200
    }
    pub fn size() -> usize {
        32
    }
    pub fn amplitude() -> f64 {
        24.0
    }
    pub fn noise() -> f64 {
        8.0
    }
    pub fn radius() -> f64 {
        0.2
    }
    pub fn jitter() -> f64 {
        0.05
    }
}

impl SyntheticSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            classes: synth::classes(),
            per_class: synth::per_class(),
            size: synth::size(),
            amplitude: synth::amplitude(),
            noise: synth::noise(),
            radius: synth::radius(),
            jitter: synth::jitter(),
            seed,
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.size, self.size, 3)
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|k| format!("class_{k:02}")).collect()
    }

    /// Orientation and colour axis of class `k`.
    fn class_pattern(&self, k: usize) -> (f64, [f64; 3]) {
        let orientations = self.classes.div_ceil(2);
        let theta = PI * (k % orientations) as f64 / orientations as f64;
        let colour = if k < orientations {
            [1.0, 0.35, -0.6]
        } else {
            [-0.6, 0.35, 1.0]
        };
        (theta, colour)
    }

    /// Renders one image of class `k` as interleaved RGB bytes.
    fn render(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let n = self.size as f64;
        let (theta, colour) = self.class_pattern(k);
        let period = 5.0;
        let phase = rng.random::<f64>() * 2.0 * PI;
        let centre = n / 2.0 - 0.5;
        let jitter = n * self.jitter;
        let cy = centre + rng.random_range(-jitter..=jitter);
        let cx = centre + rng.random_range(-jitter..=jitter);
        let radius = n * self.radius;
        let base: Vec<f64> = (0..3).map(|_| rng.random_range(90.0..165.0)).collect();
        // two random low-frequency clutter waves
        let clutter: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                let a = rng.random::<f64>() * 2.0 * PI;
                (a.cos(), a.sin(), rng.random::<f64>() * 2.0 * PI, rng.random_range(6.0..14.0))
            })
            .collect();
        let noise = Normal::new(0.0, self.noise.max(1e-12)).unwrap();
        let mut out = Vec::with_capacity(self.size * self.size * 3);
        for y in 0..self.size {
            for x in 0..self.size {
                let (yf, xf) = (y as f64, x as f64);
                let r = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
                let mask = (1.0 - ((r - radius) / 2.0).clamp(0.0, 1.0)).clamp(0.0, 1.0);
                let wave = (2.0 * PI * (xf * theta.cos() + yf * theta.sin()) / period + phase).cos();
                let bg: f64 = clutter
                    .iter()
                    .map(|(u, v, p, amp)| amp * (2.0 * PI * (xf * u + yf * v) / (n * 0.75) + p).sin())
                    .sum();
                for c in 0..3 {
                    let v = base[c]
                        + bg
                        + self.amplitude * mask * wave * colour[c]
                        + noise.sample(rng);
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// All images in class-major order with their labels.
    pub fn generate(&self) -> Vec<(usize, Vec<u8>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.classes * self.per_class);
        for k in 0..self.classes {
            for _ in 0..self.per_class {
                out.push((k, self.render(k, &mut rng)));
            }
        }
        out
    }

    /// Writes `root/class_XX/NNNN.png` files readable by [`ingest`].
    pub fn write_folder(&self, root: &Path) -> Result<()> {
        let names = self.class_names();
        for name in &names {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| UapError::io(&dir, e))?;
        }
        let s = self.size as u32;
        let mut counters = vec![0usize; self.classes];
        for (k, pixels) in self.generate() {
            let path = root.join(&names[k]).join(format!("{:04}.png", counters[k]));
            counters[k] += 1;
            image::RgbImage::from_raw(s, s, pixels)
                .expect("buffer matches dimensions")
                .save(&path)
                .map_err(|source| UapError::Image { path, source })?;
        }
        Ok(())
    }

    /// In-memory equivalent of `write_folder` followed by `ingest` and `load_dataset`.
    pub fn dataset<T: Scalar>(&self, options: &SplitOptions) -> Result<LabeledDataset<T>> {
        let images = self.generate();
        let names = self.class_names();
        let files: Vec<Vec<String>> = (0..self.classes)
            .map(|k| {
                (0..self.per_class)
                    .map(|i| format!("{}/{i:04}.png", names[k]))
                    .collect()
            })
            .collect();
        let manifest = split_files(PathBuf::new(), self.shape(), names, files, options)?;
        let pick = |sel: fn(&ClassFiles) -> &Vec<String>| -> Result<Split<T>> {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for (k, c) in manifest.classes.iter().enumerate() {
                for rel in sel(c) {
                    let i: usize = rel[rel.len() - 8..rel.len() - 4].parse().unwrap();
                    let (label, px) = &images[k * self.per_class + i];
                    debug_assert_eq!(*label, k);
                    data.extend(px.iter().map(|&v| T::lit(v as f64)));
                    labels.push(k);
                }
            }
            Split::new(ImageBatch::new(self.shape(), data, PixelRange::default())?, labels)
        };
        LabeledDataset::new(
            pick(|c| &c.train)?,
            pick(|c| &c.validation)?,
            manifest.class_names.clone(),
            options.split_seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            per_class: 6,
            size: 8,
            ..SyntheticSpec::new(4)
        }
    }

    #[test]
    fn folder_round_trip_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        spec.write_folder(dir.path()).unwrap();
        let opts = SplitOptions::new(11, 2);
        let m = ingest(dir.path(), &opts).unwrap();
        assert_eq!(m.class_names, spec.class_names());
        assert_eq!(m.train_len(), 6);
        assert_eq!(m.validation_len(), 12);
        let from_disk: LabeledDataset<f32> = m.load_dataset().unwrap();
        let in_mem: LabeledDataset<f32> = spec.dataset(&opts).unwrap();
        assert_eq!(from_disk, in_mem);
        assert_eq!(ingest(dir.path(), &opts).unwrap(), m);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        small().write_folder(dir.path()).unwrap();
        let a = ingest(dir.path(), &SplitOptions::new(1, 3)).unwrap();
        let b = ingest(dir.path(), &SplitOptions::new(2, 3)).unwrap();
        for c in &a.classes {
            assert!(c.train.iter().all(|f| !c.validation.contains(f)));
        }
        assert_ne!(a.classes, b.classes);
        assert!(ingest(dir.path(), &SplitOptions::new(1, 7)).is_err());
        let capped = a
            .resplit(&SplitOptions {
                validation_cap: Some(4),
                validation_seed: 3,
                ..SplitOptions::new(1, 3)
            })
            .unwrap();
        assert_eq!(capped.validation_len(), 4);
        assert_eq!(capped.train_len(), a.train_len());
    }

    #[test]
    fn rejects_mixed_sizes_and_empty_classes() {
        let dir = tempfile::tempdir().unwrap();
        small().write_folder(dir.path()).unwrap();
        image::RgbImage::new(5, 5)
            .save(dir.path().join("class_01/odd.png"))
            .unwrap();
        let err = ingest(dir.path(), &SplitOptions::new(1, 2)).unwrap_err().to_string();
        assert!(err.contains("class_01/odd.png"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        small().write_folder(dir.path()).unwrap();
        fs::create_dir(dir.path().join("zzz_empty")).unwrap();
        assert!(ingest(dir.path(), &SplitOptions::new(1, 2)).is_err());
    }
}
