//! Channel-attention transformer block: transposed (channel×channel)
//! attention followed by a gated depthwise feed-forward, each behind a
//! channel layer norm and a residual connection.

use candle_core::{Result, Tensor, D};
use candle_nn::{Init, VarBuilder};

use super::layers::{ChannelLayerNorm, Conv1x1, DepthwiseConv3x3};
use super::ops;

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    heads: usize,
    qkv: Conv1x1,
    qkv_dw: DepthwiseConv3x3,
    temperature: Tensor,
    project: Conv1x1,
}

impl ChannelAttention {
    pub fn new(channels: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if channels % heads != 0 {
            candle_core::bail!("{channels} channels not divisible into {heads} heads");
        }
        Ok(Self {
            heads,
            qkv: Conv1x1::new(channels, 3 * channels, vb.pp("qkv"))?,
            qkv_dw: DepthwiseConv3x3::new(3 * channels, vb.pp("qkv_dw"))?,
            temperature: vb.get_with_hints((heads, 1, 1), "temperature", Init::Const(1.0))?,
            project: Conv1x1::new(channels, channels, vb.pp("project"))?,
        })
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = t.dims4()?;
        t.reshape((b, h * w, self.heads, c / self.heads))?
            .permute((0, 2, 3, 1))?
            .contiguous()
    }

    fn l2_normalize(t: &Tensor) -> Result<Tensor> {
        let norm = (t.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        t.broadcast_div(&norm)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let q = Self::l2_normalize(&self.split_heads(&qkv.narrow(3, 0, c)?)?)?;
        let k = Self::l2_normalize(&self.split_heads(&qkv.narrow(3, c, c)?)?)?;
        let v = self.split_heads(&qkv.narrow(3, 2 * c, c)?)?;
        let attn = q.matmul(&k.t()?)?.broadcast_mul(&self.temperature)?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b, h, w, c))?;
        self.project.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct GatedFeedForward {
    hidden: usize,
    expand: Conv1x1,
    dw: DepthwiseConv3x3,
    reduce: Conv1x1,
}

impl GatedFeedForward {
    pub fn new(channels: usize, expansion: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            hidden,
            expand: Conv1x1::new(channels, 2 * hidden, vb.pp("expand"))?,
            dw: DepthwiseConv3x3::new(2 * hidden, vb.pp("dw"))?,
            reduce: Conv1x1::new(hidden, channels, vb.pp("reduce"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(&self.expand.forward(x)?)?;
        let gate = y.narrow(3, 0, self.hidden)?;
        let value = y.narrow(3, self.hidden, self.hidden)?;
        self.reduce.forward(&ops::gelu_gate(&gate, &value)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm_attn: ChannelLayerNorm,
    attn: ChannelAttention,
    norm_ffn: ChannelLayerNorm,
    ffn: GatedFeedForward,
}

impl TransformerBlock {
    pub fn new(channels: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm_attn: ChannelLayerNorm::new(channels, vb.pp("norm_attn"))?,
            attn: ChannelAttention::new(channels, heads, vb.pp("attn"))?,
            norm_ffn: ChannelLayerNorm::new(channels, vb.pp("norm_ffn"))?,
            ffn: GatedFeedForward::new(channels, 2, vb.pp("ffn"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm_attn.forward(x)?)?)?;
        &x + self.ffn.forward(&self.norm_ffn.forward(&x)?)?
    }

    /// Parameter names (relative to the block) whose zeroing makes the block
    /// the identity map.
    pub fn residual_output_params() -> [&'static str; 4] {
        [
            "attn.project.weight",
            "attn.project.bias",
            "ffn.reduce.weight",
            "ffn.reduce.bias",
        ]
    }
}
