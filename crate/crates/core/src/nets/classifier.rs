//! Frozen task model stand-in: a small convolutional classifier with an
//! embedding tap on its pooled features.

use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use super::layers::{Conv3x3, Dense};
use super::ops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub widths: [usize; 3],
    pub classes: usize,
    pub channels: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            classes: crate::synthdata::CLASS_COUNT,
            channels: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn embedding_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Debug, Clone)]
pub struct TaskClassifier {
    config: ClassifierConfig,
    convs: Vec<Conv3x3>,
    head: Dense,
}

/// Classifier outputs for a batch.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    /// `N×K` unnormalized scores.
    pub logits: Tensor,
    /// `N×E` pooled features feeding the head.
    pub embedding: Tensor,
}

impl TaskClassifier {
    pub fn new(config: ClassifierConfig, vb: VarBuilder) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = config.channels;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv3x3::new(cin, w, vb.pp(format!("conv{i}")))?);
            cin = w;
        }
        let head = Dense::new(cin, config.classes, vb.pp("head"))?;
        Ok(Self { config, convs, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.convs.iter().flat_map(|c| c.parameters()).collect();
        out.extend(self.head.parameters());
        out
    }

    /// Input `N×H×W×C` in `[0, 1]`, spatial dims divisible by 8.
    pub fn forward(&self, x: &Tensor) -> Result<ClassifierOutput> {
        let mut h = x.affine(2.0, -1.0)?;
        for conv in &self.convs {
            h = ops::max_pool2(&conv.forward(&h)?.relu()?)?;
        }
        let embedding = ops::global_avg_pool(&h)?;
        let logits = self.head.forward(&embedding)?;
        Ok(ClassifierOutput { logits, embedding })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, D};
    use candle_nn::VarMap;

    #[test]
    fn output_shapes() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let cfg = ClassifierConfig::default();
        let net = TaskClassifier::new(cfg.clone(), vb).unwrap();
        let x = Tensor::rand(0f32, 1.0, (3, 32, 32, 3), &Device::Cpu).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.logits.dims(), &[3, cfg.classes]);
        assert_eq!(out.embedding.dims(), &[3, cfg.embedding_dim()]);
        let p = candle_nn::ops::softmax(&out.logits, D::Minus1).unwrap();
        let sums: Vec<f32> = p.sum(1).unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }
}
