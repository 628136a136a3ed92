//! Dense `H×W×C` images with values in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Result, VatError};

/// Row-major `H×W×C` image. Every value lies in `[0, 1]` and `C ∈ {1, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(VatError::ShapeMismatch(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(VatError::ShapeMismatch(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(VatError::ShapeMismatch(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VatError::InvalidParameter(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Applies `f` to every value; the result is clamped back into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data = self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect();
        Self {
            data,
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// Replicates the last row and column until both sides are multiples
    /// of `multiple`.
    pub fn pad_edge(&self, multiple: usize) -> Self {
        let m = multiple.max(1);
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    data.push(self.get(y.min(self.height - 1), x.min(self.width - 1), c));
                }
            }
        }
        Self {
            height: h,
            width: w,
            channels: self.channels,
            data,
        }
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width || height == 0 || width == 0 {
            return Err(VatError::ShapeMismatch(format!(
                "cannot crop {height}x{width} from {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let start = y * self.width * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Quantizes to 8 bits per channel, the on-disk representation.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(height, width, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let color = if self.channels == 3 {
            ::image::ExtendedColorType::Rgb8
        } else {
            ::image::ExtendedColorType::L8
        };
        ::image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            ::image::ImageFormat::Png,
        )?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img.color().channel_count() {
            1 => Self::from_u8(h, w, 1, img.to_luma8().as_raw()),
            _ => Self::from_u8(h, w, 3, img.to_rgb8().as_raw()),
        }
    }

    /// Stacks images into an `N×H×W×C` tensor.
    pub fn batch_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| VatError::Empty("cannot batch zero images".into()))?;
        let (h, w, c) = first.dims();
        let mut flat = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(VatError::ShapeMismatch(format!(
                    "batch mixes {:?} and {:?}",
                    (h, w, c),
                    img.dims()
                )));
            }
            flat.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(flat, (images.len(), h, w, c), device)?.to_dtype(dtype)?)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], dtype, device)
    }

    /// Splits an `N×H×W×C` tensor back into images, clamping into `[0, 1]`.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, h, w, c) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        flat.chunks(h * w * c)
            .take(n)
            .map(|chunk| Self::from_clamped(h, w, c, chunk.to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_round_trips() {
        let data: Vec<f32> = (0..5 * 6 * 3).map(|i| (i % 11) as f32 / 10.0).collect();
        let img = ImageTensor::new(5, 6, 3, data).unwrap();
        let padded = img.pad_edge(4);
        assert_eq!(padded.dims(), (8, 8, 3));
        assert_eq!(padded.get(7, 7, 2), img.get(4, 5, 2));
        assert_eq!(padded.crop(5, 6).unwrap(), img);
        assert_eq!(img.pad_edge(1), img);
        assert!(img.crop(6, 6).is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| (i as f32 * 0.0137) % 1.0).collect();
        let img = ImageTensor::new(4, 5, 3, data).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn tensor_round_trip() {
        let a = ImageTensor::filled(2, 2, 3, 0.25).unwrap();
        let b = ImageTensor::filled(2, 2, 3, 0.75).unwrap();
        let t = ImageTensor::batch_to_tensor(&[&a, &b], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 2, 3]);
        let back = ImageTensor::batch_from_tensor(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
