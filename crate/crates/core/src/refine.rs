//! Adjustment module: amplify the perturbation where the attention image
//! reaches the threshold and attenuate it elsewhere.

use serde::{Deserialize, Serialize};

use crate::data::{linf, project_to_ball, Perturbation, Stage};
use crate::error::{Result, UapError};
use crate::saliency::WeightedAttentionImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Attention threshold in count units; `None` uses [`choose_threshold`].
    #[serde(default, rename = "T", alias = "threshold")]
    pub threshold: Option<f64>,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::reproject")]
    pub reproject: bool,
}

mod defaults {
    pub fn alpha() -> f64 {
        1.2
    }
    pub fn beta() -> f64 {
        0.8
    }
    pub fn reproject() -> bool {
        true
    }
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            alpha: defaults::alpha(),
            beta: defaults::beta(),
            reproject: defaults::reproject(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(UapError::InvalidConfig(format!(
                "alpha must be > 1, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(UapError::InvalidConfig(format!(
                "beta must be in (0, 1), got {}",
                self.beta
            )));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(UapError::InvalidConfig(format!("threshold {t} is not finite")));
            }
        }
        Ok(())
    }
}

/// Median of the attention values (mean of the middle pair for even counts).
pub fn choose_threshold<T: Scalar>(attn: &WeightedAttentionImage<T>) -> f64 {
    let mut v: Vec<f64> = attn.values.iter().map(|x| x.as_f64()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Scales every channel of pixel `(i, j)` by `alpha` if `attn[i][j] >= T`,
/// otherwise by `beta`, then optionally projects back onto the ε ball.
/// Without reprojection the recorded budget grows to the output's max magnitude.
pub fn refine<T: Scalar>(
    p: &Perturbation<T>,
    attn: &WeightedAttentionImage<T>,
    cfg: &RefineConfig,
) -> Result<Perturbation<T>> {
    cfg.validate()?;
    if p.stage != Stage::Mid {
        return Err(UapError::InvalidConfig(format!(
            "refine expects a mid perturbation, got {}",
            p.stage
        )));
    }
    if (attn.height, attn.width) != (p.shape.height, p.shape.width) {
        return Err(UapError::shape(
            format!("{}x{}", p.shape.height, p.shape.width),
            format!("{}x{}", attn.height, attn.width),
        ));
    }
    let threshold = cfg.threshold.unwrap_or_else(|| choose_threshold(attn));
    if threshold < 0.0 || threshold > attn.num_sources as f64 {
        log::warn!(
            "threshold {threshold} outside [0, {}]; every pixel falls on one side",
            attn.num_sources
        );
    }
    let t = T::lit(threshold);
    let (alpha, beta) = (T::lit(cfg.alpha), T::lit(cfg.beta));
    let c = p.shape.channels;
    let mut delta: Vec<T> = p
        .delta
        .chunks_exact(c)
        .zip(&attn.values)
        .flat_map(|(px, &y)| {
            let s = if y >= t { alpha } else { beta };
            px.iter().map(move |&d| d * s)
        })
        .collect();
    let mut epsilon = p.epsilon;
    if cfg.reproject {
        delta = project_to_ball(&delta, p.epsilon)?;
    } else {
        let grown = linf(&delta);
        if grown > epsilon {
            log::warn!("refined perturbation exceeds epsilon {epsilon}; budget recorded as {grown}");
            epsilon = grown;
        }
    }
    let out = Perturbation::new(delta, p.shape, epsilon, Stage::Fin, p.source_model_id.clone())?;
    Ok(out.with_created_unix(p.created_unix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use proptest::prelude::*;

    fn mid(delta: Vec<f64>, h: usize, w: usize, c: usize, eps: f64) -> Perturbation<f64> {
        Perturbation::new(delta, ImageShape::new(h, w, c), eps, Stage::Mid, "m").unwrap()
    }

    fn attn(values: Vec<f64>, h: usize, w: usize, n: usize) -> WeightedAttentionImage<f64> {
        WeightedAttentionImage::new(h, w, values, n).unwrap()
    }

    fn cfg(t: f64, reproject: bool) -> RefineConfig {
        RefineConfig {
            threshold: Some(t),
            alpha: 1.5,
            beta: 0.5,
            reproject,
        }
    }

    #[test]
    fn direct_application() {
        let out = refine(&mid(vec![2.0, -4.0], 1, 2, 1, 10.0), &attn(vec![5.0, 1.0], 1, 2, 5), &cfg(3.0, false))
            .unwrap();
        assert_eq!(out.delta, vec![3.0, -2.0]);
        assert_eq!(out.stage, Stage::Fin);
    }

    #[test]
    fn boundary_is_inclusive() {
        let out = refine(&mid(vec![2.0], 1, 1, 1, 10.0), &attn(vec![3.0], 1, 1, 5), &cfg(3.0, false)).unwrap();
        assert_eq!(out.delta, vec![3.0]);
    }

    #[test]
    fn reprojection_clips_to_budget() {
        let out = refine(&mid(vec![8.0], 1, 1, 1, 10.0), &attn(vec![3.0], 1, 1, 5), &cfg(3.0, true)).unwrap();
        assert_eq!(out.delta, vec![10.0]);
    }

    #[test]
    fn channels_share_the_pixel_decision() {
        let out = refine(
            &mid(vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 1, 2, 3, 10.0),
            &attn(vec![4.0, 0.0], 1, 2, 4),
            &cfg(2.0, false),
        )
        .unwrap();
        assert_eq!(out.delta, vec![1.5, 3.0, 4.5, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn threshold_medians() {
        assert_eq!(choose_threshold(&attn(vec![0.0, 0.0, 4.0, 4.0], 2, 2, 4)), 2.0);
        assert_eq!(choose_threshold(&attn(vec![3.0; 4], 2, 2, 4)), 3.0);
        let nine: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        assert_eq!(choose_threshold(&attn(nine, 3, 3, 9)), 5.0);
    }

    #[test]
    fn constant_attention_amplifies_everything() {
        let a = attn(vec![3.0; 2], 1, 2, 4);
        let c = RefineConfig {
            threshold: None,
            reproject: false,
            ..RefineConfig::default()
        };
        let out = refine(&mid(vec![1.0, -1.0], 1, 2, 1, 10.0), &a, &c).unwrap();
        assert_eq!(out.delta, vec![1.2, -1.2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = attn(vec![1.0], 1, 1, 1);
        let p = mid(vec![1.0, 1.0], 1, 2, 1, 10.0);
        assert!(refine(&p, &a, &cfg(0.5, false)).is_err());
        let mut raw = mid(vec![1.0], 1, 1, 1, 10.0);
        raw.stage = Stage::Raw;
        assert!(refine(&raw, &a, &cfg(0.5, false)).is_err());
        let bad = RefineConfig {
            alpha: 0.9,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RefineConfig {
            beta: 1.0,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn partition_sign_and_magnitude(
            delta in prop::collection::vec(-10.0f64..10.0, 12),
            counts in prop::collection::vec(0u8..6, 4),
            t in 0.0f64..5.0,
            alpha in 1.01f64..3.0,
            beta in 0.01f64..0.99,
        ) {
            let p = mid(delta.clone(), 2, 2, 3, 10.0);
            let a = attn(counts.iter().map(|&c| c as f64).collect(), 2, 2, 5);
            let c = RefineConfig { threshold: Some(t), alpha, beta, reproject: false };
            let out = refine(&p, &a, &c).unwrap();
            for (k, (&d, &r)) in delta.iter().zip(&out.delta).enumerate() {
                let hot = a.values[k / 3] >= t;
                prop_assert_eq!(r, d * if hot { alpha } else { beta });
                prop_assert!(r.signum() == d.signum() || d == 0.0);
                if hot {
                    prop_assert!(r.abs() >= d.abs());
                } else {
                    prop_assert!(r.abs() <= d.abs());
                }
            }
            let projected = refine(&p, &a, &RefineConfig { reproject: true, ..c }).unwrap();
            prop_assert!(projected.linf() <= 10.0);
        }
    }
}
