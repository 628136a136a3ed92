//! Gate-weight panels: degraded | restored | σ(w) heatmap | fused | translated.

use std::path::Path;

use candle_core::{DType, Device};

use crate::error::{Result, VatError};
use crate::image::ImageTensor;
use crate::nets::bundle::VatTranslator;

/// Blue → white → red ramp for values in `[0, 1]`.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        let t = v / 0.5;
        [t, t, 1.0]
    } else {
        let t = (v - 0.5) / 0.5;
        [1.0, 1.0 - t, 1.0 - t]
    }
}

fn upscale(img: &ImageTensor, f: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    let mut data = Vec::with_capacity(h * w * c * f * f);
    for y in 0..h * f {
        for x in 0..w * f {
            for ch in 0..c {
                data.push(img.get(y / f, x / f, ch));
            }
        }
    }
    ImageTensor::new(h * f, w * f, c, data)
}

/// Places equally sized images side by side with a `gap`-pixel white border.
pub fn hconcat(panels: &[ImageTensor], gap: usize) -> Result<ImageTensor> {
    let first = panels.first().ok_or_else(|| VatError::Empty("no panels".into()))?;
    let (h, w, c) = first.dims();
    if panels.iter().any(|p| p.dims() != (h, w, c)) {
        return Err(VatError::ShapeMismatch("panels differ in shape".into()));
    }
    let total_w = panels.len() * w + (panels.len() + 1) * gap;
    let total_h = h + 2 * gap;
    let mut data = vec![1.0f32; total_w * total_h * c];
    for (k, p) in panels.iter().enumerate() {
        let ox = gap + k * (w + gap);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[((y + gap) * total_w + ox + x) * c + ch] = p.get(y, x, ch);
                }
            }
        }
    }
    ImageTensor::new(total_h, total_w, c, data)
}

/// Gate outputs for one image pair.
#[derive(Debug, Clone)]
pub struct GatePanel {
    /// `σ(w)` per pixel, row-major.
    pub weights: Vec<f32>,
    pub fused: ImageTensor,
    pub translated: ImageTensor,
    pub panel: ImageTensor,
}

/// Renders the panel for `(i_lq, i_r)` and writes it to `path` as PNG,
/// each tile upscaled by `scale`.
pub fn gate_heatmap(vat: &VatTranslator, i_lq: &ImageTensor, i_r: &ImageTensor, scale: usize, path: &Path) -> Result<GatePanel> {
    if !i_lq.same_shape(i_r) {
        return Err(VatError::ShapeMismatch("gate inputs differ in shape".into()));
    }
    let dev = Device::Cpu;
    let out = vat.forward(&i_lq.to_tensor(DType::F32, &dev)?, &i_r.to_tensor(DType::F32, &dev)?)?;
    let (h, w, _) = i_lq.dims();
    let weights: Vec<f32> = match &out.gate {
        Some(g) => g.weights()?.flatten_all()?.to_vec1()?,
        // Without the gate the restoration passes through unchanged.
        None => vec![0.0; h * w],
    };
    let heat: Vec<f32> = weights.iter().flat_map(|&v| heat_color(v)).collect();
    let heat = ImageTensor::new(h, w, 3, heat)?;
    let fused = ImageTensor::batch_from_tensor(&out.fused)?.remove(0);
    let translated = ImageTensor::batch_from_tensor(&out.translated)?.remove(0);
    let tiles = [i_lq, i_r, &heat, &fused, &translated]
        .into_iter()
        .map(|t| upscale(t, scale.max(1)))
        .collect::<Result<Vec<_>>>()?;
    let panel = hconcat(&tiles, 2)?;
    panel.save_png(path)?;
    Ok(GatePanel {
        weights,
        fused,
        translated,
        panel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::bundle::{ModelBundle, VatArchitecture};

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(heat_color(0.5), [1.0, 1.0, 1.0]);
        assert_eq!(heat_color(1.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn equal_inputs_give_identical_fused_panel_and_valid_png() {
        let b = ModelBundle::random(VatArchitecture::default(), 2, DType::F32).unwrap();
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
        let img = ImageTensor::new(16, 16, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.png");
        let p = gate_heatmap(&b.vat, &img, &img, 2, &path).unwrap();
        assert_eq!(p.fused, img);
        assert!(p.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back.dims(), p.panel.dims());
        assert_eq!(back.width(), 5 * 32 + 6 * 2);
    }
}
