use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};
use crate::image::ImageTensor;

/// Depth proxy for the scattering model; the corpus carries no depth maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// `d(x) = 1` everywhere.
    Constant,
    /// Distance from the image center, scaled so the corners reach 1.
    Radial,
}

/// Parameters recorded per degraded sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationParams {
    Lowlight { gamma: f64 },
    Haze { beta: f64, airlight: f64, depth: DepthMode },
}

impl DegradationParams {
    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            DegradationParams::Lowlight { gamma } => degrade_lowlight(img, gamma),
            DegradationParams::Haze { beta, airlight, depth } => degrade_haze(img, beta, airlight, depth),
        }
    }
}

/// Per-pixel `v ↦ v^gamma`.
pub fn degrade_lowlight(img: &ImageTensor, gamma: f64) -> Result<ImageTensor> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(VatError::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
    }
    let g = gamma as f32;
    Ok(img.map(|v| v.powf(g)))
}

/// Atmospheric scattering: `I = J·t + A·(1 − t)` with `t = exp(−beta·d(x))`.
pub fn degrade_haze(img: &ImageTensor, beta: f64, airlight: f64, depth: DepthMode) -> Result<ImageTensor> {
    if !(beta >= 0.0) {
        return Err(VatError::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(VatError::InvalidParameter(format!("airlight must be in [0, 1], got {airlight}")));
    }
    let (h, w, c) = img.dims();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let max_r = (cy * cy + cx * cx).sqrt().max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let d = match depth {
                DepthMode::Constant => 1.0,
                DepthMode::Radial => ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / max_r,
            };
            // exp(-inf * 0) would be NaN at the center; zero depth means no haze.
            let t = if d == 0.0 { 1.0 } else { (-beta * d).exp() };
            for ch in 0..c {
                let j = img.get(y, x, ch) as f64;
                out.push((j * t + airlight * (1.0 - t)) as f32);
            }
        }
    }
    ImageTensor::from_clamped(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp() -> ImageTensor {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| i as f32 / 47.0).collect();
        ImageTensor::new(4, 4, 3, data).unwrap()
    }

    #[test]
    fn gamma_one_is_identity() {
        let img = ramp();
        assert_eq!(degrade_lowlight(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn gamma_arithmetic_and_fixed_points() {
        let img = ImageTensor::new(1, 3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let out = degrade_lowlight(&img, 2.0).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 1.0]);
        for g in [0.3, 1.7, 5.0] {
            let out = degrade_lowlight(&img, g).unwrap();
            assert_eq!(out.data()[0], 0.0);
            assert_eq!(out.data()[2], 1.0);
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(degrade_lowlight(&ramp(), 0.0).is_err());
        assert!(degrade_lowlight(&ramp(), -1.0).is_err());
    }

    #[test]
    fn haze_zero_beta_is_identity() {
        let img = ramp();
        for mode in [DepthMode::Constant, DepthMode::Radial] {
            assert_eq!(degrade_haze(&img, 0.0, 0.8, mode).unwrap(), img);
        }
    }

    #[test]
    fn haze_infinite_beta_is_airlight() {
        let out = degrade_haze(&ramp(), f64::INFINITY, 0.8, DepthMode::Constant).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.8));
    }

    #[test]
    fn haze_closed_form() {
        let img = ImageTensor::filled(2, 2, 3, 0.2).unwrap();
        let out = degrade_haze(&img, 1.0, 0.8, DepthMode::Constant).unwrap();
        let t = (-1.0f64).exp();
        let expected = (0.2 * t + 0.8 * (1.0 - t)) as f32;
        assert!(out.data().iter().all(|&v| (v - expected).abs() < 1e-7));
    }

    #[test]
    fn haze_rejects_bad_airlight() {
        assert!(degrade_haze(&ramp(), 1.0, 1.5, DepthMode::Constant).is_err());
        assert!(degrade_haze(&ramp(), -1.0, 0.5, DepthMode::Constant).is_err());
    }

    proptest! {
        #[test]
        fn gamma_never_brightens(v in 0.0f32..=1.0, g1 in 0.2f64..6.0, dg in 0.0f64..3.0) {
            let img = ImageTensor::new(1, 1, 1, vec![v]).unwrap();
            let a = degrade_lowlight(&img, g1).unwrap().data()[0];
            let b = degrade_lowlight(&img, g1 + dg).unwrap().data()[0];
            prop_assert!(b <= a);
        }

        #[test]
        fn haze_moves_toward_airlight(v in 0.0f32..=1.0, a in 0.0f64..=1.0, b1 in 0.0f64..4.0, db in 0.0f64..4.0) {
            let img = ImageTensor::filled(3, 3, 1, v).unwrap();
            let lo = degrade_haze(&img, b1, a, DepthMode::Radial).unwrap();
            let hi = degrade_haze(&img, b1 + db, a, DepthMode::Radial).unwrap();
            for (x, y) in lo.data().iter().zip(hi.data()) {
                prop_assert!((*y as f64 - a).abs() <= (*x as f64 - a).abs() + 1e-6);
            }
        }
    }
}
