//! U-shaped transformation module (`T_A` / `T_B`).
//!
//! Three levels with widths `base·{1, 2, 4}`, one transformer block per
//! encoder/decoder level, pixel-unshuffle downsampling, pixel-shuffle
//! upsampling and concatenating skip connections. The network works in logit
//! space and returns `x + σ(head) − σ(logit(x))`, which is the sigmoid output
//! away from the logit clamp and reproduces `x` bit for bit when the head
//! returns the input logits.

use candle_core::{DType, Device, Result, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::layers::{Conv1x1, Conv3x3};
use super::ops;
use super::transformer::TransformerBlock;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub base_dim: usize,
    pub channels: usize,
    /// Clamp applied before the input logit.
    pub logit_eps: f64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            base_dim: 8,
            channels: 3,
            logit_eps: 1e-3,
        }
    }
}

impl TranslatorConfig {
    /// Spatial dims must be multiples of this.
    pub const DOWNSAMPLE: usize = 4;

    pub fn heads(&self) -> [usize; 3] {
        // One head per 4 channels at the first level, doubling with width.
        let h = (self.base_dim / 4).max(1);
        [h, 2 * h, 4 * h]
    }
}

const BLOCKS: [&str; 5] = ["enc1", "enc2", "bottleneck", "dec2", "dec1"];

#[derive(Debug, Clone)]
pub struct UShapeTranslator {
    config: TranslatorConfig,
    embed: Conv3x3,
    enc1: TransformerBlock,
    down1: Conv1x1,
    enc2: TransformerBlock,
    down2: Conv1x1,
    bottleneck: TransformerBlock,
    up2: Conv1x1,
    reduce2: Conv1x1,
    dec2: TransformerBlock,
    up1: Conv1x1,
    reduce1: Conv1x1,
    dec1: TransformerBlock,
    out: Conv3x3,
}

impl UShapeTranslator {
    pub fn new(config: TranslatorConfig, vb: VarBuilder) -> Result<Self> {
        let b = config.base_dim;
        if b < config.channels {
            candle_core::bail!("base_dim {b} must be at least the image channel count");
        }
        let [h1, h2, h3] = config.heads();
        Ok(Self {
            config,
            embed: Conv3x3::new(config.channels, b, vb.pp("embed"))?,
            enc1: TransformerBlock::new(b, h1, vb.pp("enc1"))?,
            down1: Conv1x1::new(4 * b, 2 * b, vb.pp("down1"))?,
            enc2: TransformerBlock::new(2 * b, h2, vb.pp("enc2"))?,
            down2: Conv1x1::new(8 * b, 4 * b, vb.pp("down2"))?,
            bottleneck: TransformerBlock::new(4 * b, h3, vb.pp("bottleneck"))?,
            up2: Conv1x1::new(4 * b, 8 * b, vb.pp("up2"))?,
            reduce2: Conv1x1::new(4 * b, 2 * b, vb.pp("reduce2"))?,
            dec2: TransformerBlock::new(2 * b, h2, vb.pp("dec2"))?,
            up1: Conv1x1::new(2 * b, 4 * b, vb.pp("up1"))?,
            reduce1: Conv1x1::new(2 * b, b, vb.pp("reduce1"))?,
            dec1: TransformerBlock::new(b, h1, vb.pp("dec1"))?,
            out: Conv3x3::new(b, config.channels, vb.pp("out"))?,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    /// `N×H×W×C` images in `[0, 1]` to images in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let f = TranslatorConfig::DOWNSAMPLE;
        if h % f != 0 || w % f != 0 {
            candle_core::bail!("translator input {h}x{w} is not divisible by {f}");
        }
        let x0 = ops::logit(x, self.config.logit_eps)?;
        let e1 = self.enc1.forward(&self.embed.forward(&x0)?)?;
        let e2 = self.enc2.forward(&self.down1.forward(&ops::pixel_unshuffle(&e1, 2)?)?)?;
        let bn = self
            .bottleneck
            .forward(&self.down2.forward(&ops::pixel_unshuffle(&e2, 2)?)?)?;
        let u2 = ops::pixel_shuffle(&self.up2.forward(&bn)?, 2)?;
        let d2 = self.dec2.forward(&self.reduce2.forward(&Tensor::cat(&[&e2, &u2], 3)?)?)?;
        let u1 = ops::pixel_shuffle(&self.up1.forward(&d2)?, 2)?;
        let d1 = self.dec1.forward(&self.reduce1.forward(&Tensor::cat(&[&e1, &u1], 3)?)?)?;
        let delta = (candle_nn::ops::sigmoid(&self.out.forward(&d1)?)? - candle_nn::ops::sigmoid(&x0)?)?;
        (x + delta)?.clamp(0.0, 1.0)
    }
}

fn set_var(varmap: &VarMap, name: &str, value: Tensor) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    match data.get(name) {
        Some(var) => var.set(&value.to_dtype(var.dtype())?),
        None => candle_core::bail!("no variable named {name}"),
    }
}

/// Rows `tap·cin + k` of a `(9·cin)×cout` weight selecting input channel `k`
/// into output channel `k` through the center tap.
fn center_tap_selector(cin: usize, cout: usize, n: usize, device: &Device) -> Result<Tensor> {
    let mut w = vec![0f32; 9 * cin * cout];
    for k in 0..n {
        w[(4 * cin + k) * cout + k] = 1.0;
    }
    Tensor::from_vec(w, (9 * cin, cout), device)
}

/// Overwrites the translator under `prefix` in `varmap` with the identity
/// configuration: the embedding copies the input logits into the first
/// channels, every block's residual branch is zeroed, the level-1 merge keeps
/// only the skip path, and the head reads the copied channels back.
pub fn configure_identity(varmap: &VarMap, prefix: &str, config: &TranslatorConfig) -> Result<()> {
    let dev = Device::Cpu;
    let b = config.base_dim;
    let c = config.channels;
    let name = |s: &str| format!("{prefix}.{s}");
    set_var(varmap, &name("embed.weight"), center_tap_selector(c, b, c, &dev)?)?;
    set_var(varmap, &name("embed.bias"), Tensor::zeros(b, DType::F32, &dev)?)?;
    for block in BLOCKS {
        for p in TransformerBlock::residual_output_params() {
            let full = name(&format!("{block}.{p}"));
            let shape = {
                let data = varmap.data().lock().expect("varmap lock poisoned");
                data.get(&full)
                    .map(|v| v.shape().clone())
                    .ok_or_else(|| candle_core::Error::Msg(format!("no variable named {full}")))?
            };
            set_var(varmap, &full, Tensor::zeros(shape, DType::F32, &dev)?)?;
        }
    }
    let mut reduce = vec![0f32; 2 * b * b];
    for k in 0..b {
        reduce[k * b + k] = 1.0;
    }
    set_var(varmap, &name("reduce1.weight"), Tensor::from_vec(reduce, (2 * b, b), &dev)?)?;
    set_var(varmap, &name("reduce1.bias"), Tensor::zeros(b, DType::F32, &dev)?)?;
    set_var(varmap, &name("out.weight"), center_tap_selector(b, c, c, &dev)?)?;
    set_var(varmap, &name("out.bias"), Tensor::zeros(c, DType::F32, &dev)?)?;
    Ok(())
}

/// Number of scalar parameters stored under `prefix` (all when empty).
pub fn parameter_count(varmap: &VarMap, prefix: &str) -> usize {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    data.iter()
        .filter(|(k, _)| prefix.is_empty() || k.starts_with(&format!("{prefix}.")))
        .map(|(_, v)| v.elem_count())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(base: usize, dtype: DType) -> (VarMap, UShapeTranslator) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, dtype, &Device::Cpu);
        let cfg = TranslatorConfig {
            base_dim: base,
            ..Default::default()
        };
        let t = UShapeTranslator::new(cfg, vb.pp("t")).unwrap();
        (vm, t)
    }

    #[test]
    fn output_shape_matches_input() {
        let (_, t) = build(8, DType::F32);
        let x = Tensor::rand(0f32, 1.0, (2, 32, 32, 3), &Device::Cpu).unwrap();
        let y = t.forward(&x).unwrap();
        assert_eq!(y.dims(), x.dims());
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn rejects_indivisible_dims() {
        let (_, t) = build(4, DType::F32);
        let x = Tensor::rand(0f32, 1.0, (1, 30, 32, 3), &Device::Cpu).unwrap();
        assert!(t.forward(&x).is_err());
    }

    #[test]
    fn identity_configuration_reproduces_input() {
        for dtype in [DType::F32, DType::F64] {
            let (vm, t) = build(8, dtype);
            configure_identity(&vm, "t", t.config()).unwrap();
            let mut v: Vec<f64> = Tensor::rand(0f64, 1.0, 2 * 16 * 16 * 3, &Device::Cpu).unwrap().to_vec1().unwrap();
            v[0] = 0.0;
            v[1] = 1.0;
            let x = Tensor::from_vec(v, (2, 16, 16, 3), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
            let y = t.forward(&x).unwrap();
            let a: Vec<f64> = x.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            let b: Vec<f64> = y.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{dtype:?}");
        }
    }

    #[test]
    fn parameter_count_grows_with_base_dim() {
        let counts: Vec<usize> = [4, 8, 16, 32, 48]
            .iter()
            .map(|&b| {
                let (vm, _) = build(b, DType::F32);
                parameter_count(&vm, "t")
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }
}
