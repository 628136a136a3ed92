//! Frozen restoration stand-in: a small convolutional encoder-decoder with
//! one 2x downsampling stage and no full-resolution skip path.

use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::layers::Conv3x3;
use super::ops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorerConfig {
    /// Full-resolution width; the bottleneck runs at twice this.
    pub width: usize,
    /// Convolutions at the bottleneck.
    pub depth: usize,
    pub channels: usize,
    pub logit_eps: f64,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 2,
            channels: 3,
            logit_eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Restorer {
    config: RestorerConfig,
    stem: Conv3x3,
    down: Conv3x3,
    hidden: Vec<Conv3x3>,
    up: Conv3x3,
    out: Conv3x3,
}

impl Restorer {
    pub fn new(config: RestorerConfig, vb: VarBuilder) -> Result<Self> {
        let (c, w) = (config.channels, config.width);
        if w == 0 {
            candle_core::bail!("restorer width must be positive");
        }
        let hidden = (0..config.depth)
            .map(|i| Conv3x3::new(2 * w, 2 * w, vb.pp(format!("mid{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            stem: Conv3x3::new(c, w, vb.pp("stem"))?,
            down: Conv3x3::new(4 * w, 2 * w, vb.pp("down"))?,
            hidden,
            up: Conv3x3::new(2 * w, 4 * w, vb.pp("up"))?,
            out: Conv3x3::new(w, c, vb.pp("out"))?,
        })
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        [&self.stem, &self.down]
            .into_iter()
            .chain(&self.hidden)
            .chain([&self.up, &self.out])
            .flat_map(|c| c.parameters())
            .collect()
    }

    /// `N×H×W×C` images with even `H`, `W`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("restorer input {h}x{w} must have even sides");
        }
        let z = ops::logit(x, self.config.logit_eps)?;
        let e = self.stem.forward(&z)?.relu()?;
        let mut b = self.down.forward(&ops::pixel_unshuffle(&e, 2)?)?.relu()?;
        for conv in &self.hidden {
            b = conv.forward(&b)?.relu()?;
        }
        let d = ops::pixel_shuffle(&self.up.forward(&b)?, 2)?.relu()?;
        candle_nn::ops::sigmoid(&self.out.forward(&d)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    #[test]
    fn preserves_shape_and_range() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let net = Restorer::new(RestorerConfig::default(), vb).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 16, 16, 3), &Device::Cpu).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(net.parameters().len(), 2 * (4 + RestorerConfig::default().depth));
        assert!(net.forward(&Tensor::zeros((1, 5, 6, 3), DType::F32, &Device::Cpu).unwrap()).is_err());
    }
}
