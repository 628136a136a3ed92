//! Task-model outputs and a box-prediction interface built on the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    Classification,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    pub class: usize,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn validate(&self, width: f64, height: f64) -> Result<()> {
        let ordered = self.x1 <= self.x2 && self.y1 <= self.y2;
        let inside = self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height;
        if !ordered || !inside || !(0.0..=1.0).contains(&self.confidence) {
            return Err(VatError::InvalidParameter(format!("invalid box {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PredictionOutput {
    Classification(Vec<f64>),
    Detection(Vec<BoundingBox>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub output: PredictionOutput,
    pub embedding: Vec<f32>,
}

impl Prediction {
    pub fn classification(probs: Vec<f64>, embedding: Vec<f32>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(VatError::InvalidDistribution(format!("class probabilities sum to {sum}")));
        }
        Ok(Self {
            output: PredictionOutput::Classification(probs),
            embedding,
        })
    }

    pub fn detection(boxes: Vec<BoundingBox>, embedding: Vec<f32>) -> Self {
        Self {
            output: PredictionOutput::Detection(boxes),
            embedding,
        }
    }

    pub fn kind(&self) -> PredictionKind {
        match self.output {
            PredictionOutput::Classification(_) => PredictionKind::Classification,
            PredictionOutput::Detection(_) => PredictionKind::Detection,
        }
    }

    /// Largest class probability, or largest box confidence (0 with no boxes).
    pub fn max_confidence(&self) -> f64 {
        match &self.output {
            PredictionOutput::Classification(p) => p.iter().copied().fold(0.0, f64::max),
            PredictionOutput::Detection(b) => b.iter().map(|b| b.confidence).fold(0.0, f64::max),
        }
    }

    pub fn argmax(&self) -> Option<usize> {
        match &self.output {
            PredictionOutput::Classification(p) => p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i),
            PredictionOutput::Detection(_) => None,
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match &self.output {
            PredictionOutput::Classification(p) => Some(p),
            PredictionOutput::Detection(_) => None,
        }
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(VatError::InvalidParameter("resize target must be nonempty".into()));
    }
    let (h, w, c) = img.dims();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - tx) + img.get(y0, x1, ch) * tx;
                let bot = img.get(y1, x0, ch) * (1.0 - tx) + img.get(y1, x1, ch) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    ImageTensor::from_clamped(height, width, c, out)
}

/// Crops `[y, y+h) × [x, x+w)`.
pub fn crop(img: &ImageTensor, y: usize, x: usize, h: usize, w: usize) -> Result<ImageTensor> {
    let (ih, iw, c) = img.dims();
    if h == 0 || w == 0 || y + h > ih || x + w > iw {
        return Err(VatError::InvalidParameter(format!("crop {h}x{w}+{y}+{x} outside {ih}x{iw}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for yy in y..y + h {
        let start = (yy * iw + x) * c;
        out.extend_from_slice(&img.data()[start..start + w * c]);
    }
    ImageTensor::new(h, w, c, out)
}

/// Turns an image classifier into a box predictor by scoring square windows.
///
/// `classify` maps a batch of model-sized crops to predictions. Windows whose
/// top class probability reaches `min_confidence` become boxes.
#[derive(Debug, Clone)]
pub struct SlidingWindowDetector {
    pub window: usize,
    pub stride: usize,
    pub model_size: usize,
    pub min_confidence: f64,
}

impl SlidingWindowDetector {
    pub fn windows(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.window > height || self.window > width || self.stride == 0 {
            return out;
        }
        let mut y = 0;
        while y + self.window <= height {
            let mut x = 0;
            while x + self.window <= width {
                out.push((y, x));
                x += self.stride;
            }
            y += self.stride;
        }
        out
    }

    pub fn detect<F>(&self, img: &ImageTensor, classify: F) -> Result<Prediction>
    where
        F: Fn(&[ImageTensor]) -> Result<Vec<Prediction>>,
    {
        let windows = self.windows(img.height(), img.width());
        let crops = windows
            .iter()
            .map(|&(y, x)| {
                let c = crop(img, y, x, self.window, self.window)?;
                resize_bilinear(&c, self.model_size, self.model_size)
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = if crops.is_empty() { Vec::new() } else { classify(&crops)? };
        let mut boxes = Vec::new();
        let mut embedding: Vec<f32> = Vec::new();
        for (&(y, x), pred) in windows.iter().zip(&preds) {
            if embedding.is_empty() {
                embedding = vec![0.0; pred.embedding.len()];
            }
            for (e, v) in embedding.iter_mut().zip(&pred.embedding) {
                *e += v / preds.len() as f32;
            }
            let (Some(class), conf) = (pred.argmax(), pred.max_confidence()) else {
                continue;
            };
            if conf >= self.min_confidence {
                boxes.push(BoundingBox {
                    x1: x as f64,
                    y1: y as f64,
                    x2: (x + self.window) as f64,
                    y2: (y + self.window) as f64,
                    confidence: conf,
                    class,
                });
            }
        }
        Ok(Prediction::detection(boxes, embedding))
    }
}
