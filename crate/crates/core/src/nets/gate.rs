//! Gated fusion of the degraded input and the restoration output.

use candle_core::{DType, Device, Result, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::layers::{Conv1x1, Conv3x3};
use super::transformer::TransformerBlock;
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub dim: usize,
    pub heads: usize,
    pub channels: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            heads: 2,
            channels: 3,
        }
    }
}

/// Per-pixel gate logits and the fused image, both `N×H×W×·`.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub logits: Tensor,
    pub fused: Tensor,
}

impl GateOutput {
    /// `σ(w)` as an `N×H×W×1` tensor.
    pub fn weights(&self) -> Result<Tensor> {
        candle_nn::ops::sigmoid(&self.logits)
    }
}

/// `σ(w)⊙a + (1−σ(w))⊙b`, evaluated as `b + σ(w)⊙(a − b)` so equal inputs
/// pass through unchanged, then clipped to the elementwise envelope to absorb
/// rounding.
pub fn fuse_with_logits(a: &Tensor, b: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let s = candle_nn::ops::sigmoid(logits)?;
    let fused = b.broadcast_add(&(a - b)?.broadcast_mul(&s)?)?;
    let lo = a.minimum(b)?;
    let hi = a.maximum(b)?;
    fused.maximum(&lo)?.minimum(&hi)
}

#[derive(Debug, Clone)]
pub struct GatedFusion {
    embed: Conv3x3,
    block: TransformerBlock,
    point: Conv1x1,
}

impl GatedFusion {
    pub fn new(config: GateConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            embed: Conv3x3::new(2 * config.channels, config.dim, vb.pp("embed"))?,
            block: TransformerBlock::new(config.dim, config.heads, vb.pp("block"))?,
            point: Conv1x1::new(config.dim, 1, vb.pp("point"))?,
        })
    }

    pub fn logits(&self, i_lq: &Tensor, i_r: &Tensor) -> Result<Tensor> {
        let pair = Tensor::cat(&[i_lq, i_r], 3)?.affine(2.0, -1.0)?;
        self.point.forward(&self.block.forward(&self.embed.forward(&pair)?)?)
    }

    pub fn forward(&self, i_lq: &Tensor, i_r: &Tensor) -> Result<GateOutput> {
        if i_lq.dims() != i_r.dims() {
            candle_core::bail!("gate inputs differ in shape: {:?} vs {:?}", i_lq.dims(), i_r.dims());
        }
        let logits = self.logits(i_lq, i_r)?;
        let fused = fuse_with_logits(i_lq, i_r, &logits)?;
        Ok(GateOutput { logits, fused })
    }
}

/// Image-level gate result: `σ(w)` as an `H×W` map and the fused image.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    pub weights: Vec<f32>,
    pub fused: ImageTensor,
}

/// Runs the gate on a single image pair.
pub fn gate_fuse(gate: &GatedFusion, i_lq: &ImageTensor, i_r: &ImageTensor) -> crate::Result<FusedImage> {
    if !i_lq.same_shape(i_r) {
        return Err(crate::VatError::ShapeMismatch(format!(
            "gate inputs {:?} and {:?}",
            i_lq.dims(),
            i_r.dims()
        )));
    }
    let dev = Device::Cpu;
    let out = gate.forward(&i_lq.to_tensor(DType::F32, &dev)?, &i_r.to_tensor(DType::F32, &dev)?)?;
    let weights: Vec<f32> = out.weights()?.flatten_all()?.to_vec1()?;
    let fused = ImageTensor::batch_from_tensor(&out.fused)?.remove(0);
    Ok(FusedImage { weights, fused })
}
