//! Uncertainty-guided mixup of fused degraded images with clean images.

use candle_core::{DType, Device};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::losses::mix_images;
use crate::error::{Result, VatError};
use crate::image::ImageTensor;
use crate::nets::bundle::ModelBundle;
use crate::pseudolabel::{LabelPayload, PseudoLabel, SoftLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// No interpolation: kept pseudo-labelled fused images are used as is.
    Off,
    /// `λ ~ Beta(α, α)` with unit label weights.
    Plain,
    /// `λ ~ Beta(α, α)` with labels weighted by certainty `1 − u`.
    Uncertainty,
}

impl MixupMode {
    pub fn sample_lambda<R: Rng>(&self, alpha: f64, rng: &mut R) -> Result<f64> {
        match self {
            MixupMode::Off => Ok(1.0),
            _ => {
                let beta = Beta::new(alpha, alpha).map_err(|e| VatError::InvalidParameter(format!("beta({alpha}): {e}")))?;
                Ok(beta.sample(rng))
            }
        }
    }

    /// Label weights `(c_LQ, c_HQ)` for a degraded pseudo-label with
    /// uncertainty `u_lq` and a clean label of certainty `w_hq`.
    pub fn certainties(&self, u_lq: f64, w_hq: f64) -> (f64, f64) {
        match self {
            MixupMode::Uncertainty => (1.0 - u_lq, w_hq),
            _ => (1.0, 1.0),
        }
    }
}

/// `c_LQ·λ·y_LQ + c_HQ·(1−λ)·y_HQ`, renormalized. The corners `λ ∈ {0, 1}`
/// return the corresponding pure label. `None` when the raw mass is zero.
pub fn mix_labels(y_lq: &[f64], c_lq: f64, y_hq: &[f64], c_hq: f64, lambda: f64) -> Result<Option<Vec<f64>>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(VatError::InvalidParameter(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if y_lq.len() != y_hq.len() {
        return Err(VatError::ShapeMismatch(format!("{} vs {} classes", y_lq.len(), y_hq.len())));
    }
    if lambda == 1.0 {
        return Ok((c_lq > 0.0).then(|| y_lq.to_vec()));
    }
    if lambda == 0.0 {
        return Ok((c_hq > 0.0).then(|| y_hq.to_vec()));
    }
    let raw: Vec<f64> = y_lq
        .iter()
        .zip(y_hq)
        .map(|(a, b)| c_lq * lambda * a + c_hq * (1.0 - lambda) * b)
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return Ok(None);
    }
    Ok(Some(raw.into_iter().map(|v| v / sum).collect()))
}

/// Image-level mixup of one sample: `λ·G(i_lq, i_r) + (1−λ)·i_hq` and the
/// mixed label. `None` when both label weights vanish.
#[allow(clippy::too_many_arguments)]
pub fn mixup(
    i_lq: &ImageTensor,
    i_r: &ImageTensor,
    i_hq: &ImageTensor,
    y_lq: &PseudoLabel,
    y_hq: &SoftLabel,
    lambda: f64,
    mode: MixupMode,
    bundle: &ModelBundle,
) -> Result<Option<(ImageTensor, SoftLabel)>> {
    if !i_lq.same_shape(i_r) || !i_lq.same_shape(i_hq) {
        return Err(VatError::ShapeMismatch("mixup images differ in shape".into()));
    }
    let LabelPayload::Soft(soft) = &y_lq.label else {
        return Err(VatError::KindMismatch("mixup needs classification pseudo-labels".into()));
    };
    let (c_lq, c_hq) = mode.certainties(y_lq.u, y_hq.weight);
    let Some(probs) = mix_labels(&soft.probs, c_lq, &y_hq.probs, c_hq, lambda)? else {
        return Ok(None);
    };
    let dev = Device::Cpu;
    let dtype = DType::F32;
    let (_, fused) = bundle.vat.fuse(&i_lq.to_tensor(dtype, &dev)?, &i_r.to_tensor(dtype, &dev)?)?;
    let mixed = mix_images(&fused, &i_hq.to_tensor(dtype, &dev)?, &[lambda])?;
    let image = ImageTensor::batch_from_tensor(&mixed)?.remove(0);
    Ok(Some((image, SoftLabel::new(probs, 1.0)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn corners_return_pure_labels() {
        let a = [0.7, 0.2, 0.1];
        let b = [0.1, 0.1, 0.8];
        assert_eq!(mix_labels(&a, 0.3, &b, 0.9, 1.0).unwrap().unwrap(), a.to_vec());
        assert_eq!(mix_labels(&a, 0.3, &b, 0.9, 0.0).unwrap().unwrap(), b.to_vec());
    }

    #[test]
    fn half_mix_of_two_classes() {
        let y = mix_labels(&[1.0, 0.0], 1.0, &[0.0, 1.0], 1.0, 0.5).unwrap().unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_certainty_skips() {
        assert_eq!(mix_labels(&[1.0, 0.0], 0.0, &[0.0, 1.0], 0.0, 0.5).unwrap(), None);
        assert_eq!(mix_labels(&[1.0, 0.0], 0.0, &[0.0, 1.0], 1.0, 1.0).unwrap(), None);
    }

    #[test]
    fn lambda_range_checked() {
        assert!(mix_labels(&[1.0], 1.0, &[1.0], 1.0, 1.5).is_err());
        assert!(mix_labels(&[1.0], 1.0, &[1.0], 1.0, -0.1).is_err());
    }

    #[test]
    fn off_mode_is_lambda_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(MixupMode::Off.sample_lambda(1.0, &mut rng).unwrap(), 1.0);
        let l = MixupMode::Plain.sample_lambda(1.0, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&l));
        assert_eq!(MixupMode::Plain.certainties(0.4, 0.2), (1.0, 1.0));
        assert_eq!(MixupMode::Uncertainty.certainties(0.4, 0.2), (0.6, 0.2));
    }

    fn simplex(v: Vec<f64>) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn mixed_label_is_distribution(
            a in proptest::collection::vec(0.01f64..1.0, 4),
            b in proptest::collection::vec(0.01f64..1.0, 4),
            c1 in 0.0f64..1.0,
            c2 in 0.0f64..1.0,
            lambda in 0.0f64..=1.0,
        ) {
            if let Some(y) = mix_labels(&simplex(a), c1, &simplex(b), c2, lambda).unwrap() {
                prop_assert!(y.iter().all(|&p| p >= 0.0));
                prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
