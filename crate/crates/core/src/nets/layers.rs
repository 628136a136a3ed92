use candle_core::{Result, Tensor};
use candle_nn::{Init, VarBuilder};

use super::ops;

fn uniform_fan_in(fan_in: usize) -> Init {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Init::Uniform { lo: -bound, up: bound }
}

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl Conv3x3 {
    pub fn parameters(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform_fan_in(9 * cin);
        Ok(Self {
            weight: vb.get_with_hints((9 * cin, cout), "weight", init)?,
            bias: vb.get_with_hints(cout, "bias", init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv3x3(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    weight: Tensor,
    bias: Tensor,
}

impl Conv1x1 {
    pub fn parameters(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform_fan_in(cin);
        Ok(Self {
            weight: vb.get_with_hints((cin, cout), "weight", init)?,
            bias: vb.get_with_hints(cout, "bias", init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv1x1(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform_fan_in(9);
        Ok(Self {
            weight: vb.get_with_hints((9, channels), "weight", init)?,
            bias: vb.get_with_hints(channels, "bias", init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::depthwise3x3(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl ChannelLayerNorm {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::channel_layer_norm(x, &self.weight, &self.bias, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn parameters(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let init = uniform_fan_in(cin);
        Ok(Self {
            weight: vb.get_with_hints((cin, cout), "weight", init)?,
            bias: vb.get_with_hints(cout, "bias", init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::add_bias(&x.matmul(&self.weight)?, &self.bias)
    }
}
