//! Attack success rate, perturbation magnitude, transfer matrix, selectivity
//! and norm sweeps, plus their JSON/CSV report forms.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_labels, ClassifierAdapter};
use crate::data::{apply_delta, apply_perturbation, perturbation_l2, Perturbation, Split};
use crate::error::{Result, UapError};
use crate::scalar::Scalar;

pub const DEFAULT_EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub perturbation_id: String,
    pub stage: String,
    pub asr: f64,
    pub pm: f64,
    pub clean_accuracy: f64,
    pub num_images: usize,
    pub config_snapshot: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityDistribution {
    pub model_id: String,
    pub class_names: Vec<String>,
    /// Fraction of adversarial predictions per class; sums to one.
    pub fractions: Vec<f64>,
}

impl SelectivityDistribution {
    /// Sum of the `k` largest fractions.
    pub fn top_k_mass(&self, k: usize) -> f64 {
        let mut f = self.fractions.clone();
        f.sort_by(|a, b| b.total_cmp(a));
        f.iter().take(k).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `asr[s][t]`: success of the perturbation crafted on source `s` against target `t`.
    pub asr: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub norm: f64,
    pub scale: f64,
    pub asr: f64,
}

fn misclassified(pred: &[usize], labels: &[usize]) -> f64 {
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len() as f64
}

fn nonempty<T: Scalar>(data: &Split<T>) -> Result<()> {
    if data.is_empty() {
        return Err(UapError::Empty("evaluation split".into()));
    }
    Ok(())
}

/// Fraction of all images in `data` misclassified after applying `p` (clipped).
pub fn attack_success_rate<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    p: &Perturbation<T>,
) -> Result<f64> {
    attack_success_rate_batched(target, data, p, DEFAULT_EVAL_BATCH)
}

pub fn attack_success_rate_batched<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    p: &Perturbation<T>,
    batch_size: usize,
) -> Result<f64> {
    nonempty(data)?;
    let adv = apply_perturbation(&data.images, p)?;
    let pred = predict_labels(target, &adv, batch_size)?;
    Ok(misclassified(&pred, &data.labels))
}

pub fn clean_accuracy<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    batch_size: usize,
) -> Result<f64> {
    nonempty(data)?;
    let pred = predict_labels(target, &data.images, batch_size)?;
    Ok(1.0 - misclassified(&pred, &data.labels))
}

/// ASR, effective PM and clean accuracy of one perturbation on one target.
pub fn evaluate<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    p: &Perturbation<T>,
    perturbation_id: &str,
    batch_size: usize,
    config_snapshot: serde_json::Value,
) -> Result<EvaluationReport> {
    nonempty(data)?;
    let adv = apply_perturbation(&data.images, p)?;
    let pm = perturbation_l2(&data.images, &adv)?;
    let asr = misclassified(&predict_labels(target, &adv, batch_size)?, &data.labels);
    Ok(EvaluationReport {
        model_id: target.model_id().to_owned(),
        perturbation_id: perturbation_id.to_owned(),
        stage: p.stage.as_str().to_owned(),
        asr,
        pm,
        clean_accuracy: clean_accuracy(target, data, batch_size)?,
        num_images: data.len(),
        config_snapshot,
    })
}

/// Entry `(s, t)` is the ASR of `perturbations[s]` on `targets[t]`.
pub fn transfer_matrix<T: Scalar>(
    perturbations: &[(String, Perturbation<T>)],
    targets: &[&dyn ClassifierAdapter<T>],
    data: &Split<T>,
) -> Result<TransferMatrix> {
    let asr = perturbations
        .iter()
        .map(|(_, p)| {
            targets
                .iter()
                .map(|t| attack_success_rate(*t, data, p))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferMatrix {
        sources: perturbations.iter().map(|(s, _)| s.clone()).collect(),
        targets: targets.iter().map(|t| t.model_id().to_owned()).collect(),
        asr,
    })
}

/// Normalized histogram of predicted classes on the adversarial images.
pub fn selectivity<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    p: &Perturbation<T>,
    class_names: &[String],
) -> Result<SelectivityDistribution> {
    nonempty(data)?;
    let adv = apply_perturbation(&data.images, p)?;
    let pred = predict_labels(target, &adv, DEFAULT_EVAL_BATCH)?;
    let m = target.num_classes();
    let mut counts = vec![0usize; m];
    for &c in &pred {
        counts[c] += 1;
    }
    let names = if class_names.len() == m {
        class_names.to_vec()
    } else {
        (0..m).map(|i| i.to_string()).collect()
    };
    Ok(SelectivityDistribution {
        model_id: target.model_id().to_owned(),
        class_names: names,
        fractions: counts
            .iter()
            .map(|&c| c as f64 / pred.len() as f64)
            .collect(),
    })
}

/// ASR after rescaling raw `delta` so its mean effective l2 on `data` would be
/// each target norm; rescaled perturbations are clipped per image, not re-projected.
pub fn norm_sweep<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    p: &Perturbation<T>,
    norms: &[f64],
) -> Result<Vec<SweepPoint>> {
    nonempty(data)?;
    if let Some(n) = norms.iter().find(|&&n| !(n > 0.0)) {
        return Err(UapError::InvalidConfig(format!("sweep norms must be positive, got {n}")));
    }
    let pm = perturbation_l2(&data.images, &apply_perturbation(&data.images, p)?)?;
    if pm == 0.0 {
        return Err(UapError::ZeroPerturbation);
    }
    norms
        .iter()
        .map(|&norm| {
            let scale = norm / pm;
            let s = T::lit(scale);
            let delta: Vec<T> = p.delta.iter().map(|&d| d * s).collect();
            let adv = apply_delta(&data.images, &delta, p.shape)?;
            let pred = predict_labels(target, &adv, DEFAULT_EVAL_BATCH)?;
            Ok(SweepPoint {
                norm,
                scale,
                asr: misclassified(&pred, &data.labels),
            })
        })
        .collect()
}

/// Uniform `±epsilon` sign noise seeded by `seed`.
pub fn sign_noise<T: Scalar>(shape: crate::data::ImageShape, epsilon: f64, seed: u64) -> Perturbation<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = T::lit(epsilon);
    let delta = (0..shape.len())
        .map(|_| if rng.random::<bool>() { eps } else { -eps })
        .collect();
    Perturbation {
        delta,
        shape,
        epsilon: eps,
        stage: crate::data::Stage::Raw,
        source_model_id: format!("sign_noise:{seed}"),
        created_unix: 0,
    }
}

/// Mean ASR over `seeds` of sign-noise perturbations at `epsilon`.
pub fn random_noise_baseline<T: Scalar>(
    target: &dyn ClassifierAdapter<T>,
    data: &Split<T>,
    epsilon: f64,
    seeds: &[u64],
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(UapError::Empty("noise seeds".into()));
    }
    let shape = data.images.shape();
    let total = seeds
        .iter()
        .map(|&s| attack_success_rate(target, data, &sign_noise::<T>(shape, epsilon, s)))
        .sum::<Result<f64>>()?;
    Ok(total / seeds.len() as f64)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).map_err(|e| UapError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| UapError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

impl TransferMatrix {
    /// One row per `(source, target)` pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["source", "target", "asr"])?;
        for (s, row) in self.sources.iter().zip(&self.asr) {
            for (t, v) in self.targets.iter().zip(row) {
                w.write_record([s.as_str(), t.as_str(), &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| UapError::io(path, e))
    }
}

impl SelectivityDistribution {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["class_id", "class_name", "fraction"])?;
        for (i, (n, f)) in self.class_names.iter().zip(&self.fractions).enumerate() {
            w.write_record([i.to_string(), n.clone(), f.to_string()])?;
        }
        w.flush().map_err(|e| UapError::io(path, e))
    }
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["norm", "scale", "asr"])?;
    for p in points {
        w.write_record([p.norm.to_string(), p.scale.to_string(), p.asr.to_string()])?;
    }
    w.flush().map_err(|e| UapError::io(path, e))
}

pub fn write_reports_csv(reports: &[EvaluationReport], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["model_id", "perturbation_id", "stage", "asr", "pm", "clean_accuracy", "num_images"])?;
    for r in reports {
        w.write_record([
            r.model_id.clone(),
            r.perturbation_id.clone(),
            r.stage.clone(),
            r.asr.to_string(),
            r.pm.to_string(),
            r.clean_accuracy.to_string(),
            r.num_images.to_string(),
        ])?;
    }
    w.flush().map_err(|e| UapError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::NetworkClassifier;
    use crate::data::{ImageBatch, ImageShape, PixelRange, Stage};
    use crate::nn::{Layer, LayerKind, Network};

    /// Two-class linear model on 1×1×1 images: class 1 iff x > 100.
    fn threshold_model() -> NetworkClassifier<f64> {
        let net = Network::new(
            ImageShape::new(1, 1, 1),
            vec![Layer {
                name: "logits".into(),
                kind: LayerKind::Dense {
                    inputs: 1,
                    outputs: 2,
                    params: vec![0.0, 1.0, 0.0, -100.0],
                },
            }],
        )
        .unwrap();
        NetworkClassifier::new("thr", net, "input").unwrap()
    }

    fn split(xs: &[f64], labels: &[usize]) -> Split<f64> {
        Split::new(
            ImageBatch::new(ImageShape::new(1, 1, 1), xs.to_vec(), PixelRange::default()).unwrap(),
            labels.to_vec(),
        )
        .unwrap()
    }

    fn shift(v: f64) -> Perturbation<f64> {
        Perturbation::new(vec![v], ImageShape::new(1, 1, 1), 50.0, Stage::Mid, "thr").unwrap()
    }

    #[test]
    fn asr_definitions() {
        let m = threshold_model();
        // 95 is a clean mistake (label 1 but x < 100)
        let d = split(&[90.0, 95.0, 110.0, 120.0], &[0, 1, 1, 1]);
        let acc = clean_accuracy(&m, &d, 2).unwrap();
        assert_eq!(acc, 0.75);
        assert_eq!(attack_success_rate(&m, &d, &shift(0.0)).unwrap(), 1.0 - acc);
        assert_eq!(attack_success_rate(&m, &d, &shift(-50.0)).unwrap(), 0.75);
        for b in 1..5 {
            assert_eq!(attack_success_rate_batched(&m, &d, &shift(-15.0), b).unwrap(), 0.5);
        }
    }

    #[test]
    fn selectivity_point_mass_and_uniform() {
        let m = threshold_model();
        let d = split(&[90.0, 95.0, 110.0, 120.0], &[0, 1, 1, 1]);
        let s = selectivity(&m, &d, &shift(50.0), &[]).unwrap();
        assert_eq!(s.fractions, vec![0.0, 1.0]);
        assert_eq!(s.top_k_mass(1), 1.0);
        let u = SelectivityDistribution {
            model_id: "u".into(),
            class_names: vec![],
            fractions: vec![0.25; 4],
        };
        assert_eq!(u.top_k_mass(3), 0.75);
    }

    #[test]
    fn sweep_rejects_zero_perturbation() {
        let m = threshold_model();
        let d = split(&[90.0], &[0]);
        assert!(matches!(
            norm_sweep(&m, &d, &shift(0.0), &[1.0]),
            Err(UapError::ZeroPerturbation)
        ));
    }

    #[test]
    fn noise_baseline_zero_epsilon_and_determinism() {
        let m = threshold_model();
        let d = split(&[90.0, 95.0, 110.0, 120.0], &[0, 1, 1, 1]);
        let base = random_noise_baseline(&m, &d, 0.0, &[1, 2, 3]).unwrap();
        assert_eq!(base, 0.25);
        let a = random_noise_baseline(&m, &d, 12.0, &[4]).unwrap();
        let b = random_noise_baseline(&m, &d, 12.0, &[4]).unwrap();
        assert_eq!(a, b);
    }
}
