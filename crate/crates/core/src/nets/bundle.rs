//! Frozen model wrappers and the trainable translator bundle.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, CheckpointMeta, ModelRole};
use super::classifier::{ClassifierConfig, ClassifierOutput, TaskClassifier};
use super::gate::{GateConfig, GateOutput, GatedFusion};
use super::init::seeded_var_builder;
use super::prediction::Prediction;
use super::restorer::{Restorer, RestorerConfig};
use super::translator::{TranslatorConfig, UShapeTranslator};
use crate::error::{Result, VatError};
use crate::image::ImageTensor;

/// Images per forward pass for batched inference.
pub const INFER_BATCH: usize = 100;

/// A read-only builder over the current values of `varmap`.
fn scoped(vb: VarBuilder<'static>, prefix: &str) -> VarBuilder<'static> {
    if prefix.is_empty() {
        vb
    } else {
        vb.pp(prefix)
    }
}

pub fn frozen_from_varmap(varmap: &VarMap, dtype: DType) -> VarBuilder<'static> {
    let tensors: HashMap<String, Tensor> = varmap
        .data()
        .lock()
        .expect("varmap lock poisoned")
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
        .collect();
    VarBuilder::from_tensors(tensors, dtype, &Device::Cpu)
}

fn batched<T>(
    images: &[ImageTensor],
    dtype: DType,
    mut f: impl FnMut(&Tensor) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = ImageTensor::batch_to_tensor(&refs, dtype, &Device::Cpu)?;
        out.extend(f(&x)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FrozenRestorer {
    pub net: Restorer,
    pub meta: CheckpointMeta,
    dtype: DType,
}

impl FrozenRestorer {
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let (meta, vb) = checkpoint::frozen_var_builder(path, ModelRole::Restoration, dtype)?;
        let config: RestorerConfig = meta.architecture()?;
        Ok(Self {
            net: Restorer::new(config, vb)?,
            meta,
            dtype,
        })
    }

    pub fn from_varmap(varmap: &VarMap, prefix: &str, meta: CheckpointMeta, dtype: DType) -> Result<Self> {
        let config: RestorerConfig = meta.architecture()?;
        let net = Restorer::new(config, scoped(frozen_from_varmap(varmap, dtype), prefix))?;
        Ok(Self { net, meta, dtype })
    }

    pub fn restore(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        batched(images, self.dtype, |x| Ok(ImageTensor::batch_from_tensor(&self.net.forward(x)?)?))
    }
}

/// Softmax probabilities and embeddings of a classifier batch output.
pub fn predictions_from_output(out: &ClassifierOutput) -> Result<Vec<Prediction>> {
    let probs = candle_nn::ops::softmax(&out.logits.to_dtype(DType::F64)?, D::Minus1)?;
    let probs: Vec<Vec<f64>> = probs.to_vec2()?;
    let emb: Vec<Vec<f32>> = out.embedding.to_dtype(DType::F32)?.to_vec2()?;
    probs
        .into_iter()
        .zip(emb)
        .map(|(p, e)| Prediction::classification(p, e))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FrozenClassifier {
    pub net: TaskClassifier,
    pub meta: CheckpointMeta,
    dtype: DType,
}

impl FrozenClassifier {
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let (meta, vb) = checkpoint::frozen_var_builder(path, ModelRole::Task, dtype)?;
        let config: ClassifierConfig = meta.architecture()?;
        Ok(Self {
            net: TaskClassifier::new(config, vb)?,
            meta,
            dtype,
        })
    }

    pub fn from_varmap(varmap: &VarMap, prefix: &str, meta: CheckpointMeta, dtype: DType) -> Result<Self> {
        let config: ClassifierConfig = meta.architecture()?;
        let net = TaskClassifier::new(config, scoped(frozen_from_varmap(varmap, dtype), prefix))?;
        Ok(Self { net, meta, dtype })
    }

    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<Prediction>> {
        batched(images, self.dtype, |x| predictions_from_output(&self.net.forward(x)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VatArchitecture {
    pub translator: TranslatorConfig,
    pub gate: GateConfig,
    /// When false the restoration output feeds the translator directly.
    pub gate_enabled: bool,
}

impl Default for VatArchitecture {
    fn default() -> Self {
        Self {
            translator: TranslatorConfig::default(),
            gate: GateConfig::default(),
            gate_enabled: true,
        }
    }
}

/// `F_VaT^A`: gate followed by the forward transformation module.
#[derive(Debug, Clone)]
pub struct VatTranslator {
    pub arch: VatArchitecture,
    pub gate: GatedFusion,
    pub t_a: UShapeTranslator,
}

#[derive(Debug, Clone)]
pub struct VatOutput {
    pub gate: Option<GateOutput>,
    pub fused: Tensor,
    pub translated: Tensor,
}

impl VatTranslator {
    pub fn new(arch: VatArchitecture, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            arch,
            gate: GatedFusion::new(arch.gate, vb.pp("gate"))?,
            t_a: UShapeTranslator::new(arch.translator, vb.pp("t_a"))?,
        })
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(CheckpointMeta, Self)> {
        let (meta, vb) = checkpoint::frozen_var_builder(path, ModelRole::Translator, dtype)?;
        let arch: VatArchitecture = meta.architecture()?;
        let net = Self::new(arch, vb)?;
        Ok((meta, net))
    }

    pub fn fuse(&self, i_lq: &Tensor, i_r: &Tensor) -> candle_core::Result<(Option<GateOutput>, Tensor)> {
        if self.arch.gate_enabled {
            let g = self.gate.forward(i_lq, i_r)?;
            let fused = g.fused.clone();
            Ok((Some(g), fused))
        } else {
            Ok((None, i_r.clone()))
        }
    }

    /// `T_A(G_A(i_lq, i_r))`.
    pub fn forward(&self, i_lq: &Tensor, i_r: &Tensor) -> candle_core::Result<VatOutput> {
        let (gate, fused) = self.fuse(i_lq, i_r)?;
        let translated = self.t_a.forward(&fused)?;
        Ok(VatOutput {
            gate,
            fused,
            translated,
        })
    }

    /// Translates degraded images given their restorations, batching internally.
    pub fn translate(&self, degraded: &[ImageTensor], restored: &[ImageTensor], dtype: DType) -> Result<Vec<ImageTensor>> {
        if degraded.len() != restored.len() {
            return Err(VatError::ShapeMismatch(format!(
                "{} degraded vs {} restored images",
                degraded.len(),
                restored.len()
            )));
        }
        let mut out = Vec::with_capacity(degraded.len());
        for (lq, r) in degraded.chunks(INFER_BATCH).zip(restored.chunks(INFER_BATCH)) {
            let lq: Vec<&ImageTensor> = lq.iter().collect();
            let r: Vec<&ImageTensor> = r.iter().collect();
            let x_lq = ImageTensor::batch_to_tensor(&lq, dtype, &Device::Cpu)?;
            let x_r = ImageTensor::batch_to_tensor(&r, dtype, &Device::Cpu)?;
            out.extend(ImageTensor::batch_from_tensor(&self.forward(&x_lq, &x_r)?.translated)?);
        }
        Ok(out)
    }
}

/// Frozen `R` and `D` with the trainable `θ_A = (G_A, T_A)` and `θ_B = T_B`.
pub struct ModelBundle {
    pub restorer: Restorer,
    pub classifier: TaskClassifier,
    pub vat: VatTranslator,
    pub t_b: UShapeTranslator,
    pub theta_a: VarMap,
    pub theta_b: VarMap,
}

impl ModelBundle {
    /// Fresh trainable parameters drawn from `seed`.
    pub fn new(restorer: Restorer, classifier: TaskClassifier, arch: VatArchitecture, seed: u64, dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let theta_a = VarMap::new();
        let theta_b = VarMap::new();
        let vat = VatTranslator::new(arch, seeded_var_builder(&theta_a, seed, dtype, &dev))?;
        let t_b = UShapeTranslator::new(
            arch.translator,
            seeded_var_builder(&theta_b, seed ^ 0x9e37_79b9_7f4a_7c15, dtype, &dev).pp("t_b"),
        )?;
        Ok(Self {
            restorer,
            classifier,
            vat,
            t_b,
            theta_a,
            theta_b,
        })
    }

    /// A bundle whose frozen models are also drawn from `seed`, for tests
    /// and numerical checks that need no pretrained checkpoints.
    pub fn random(arch: VatArchitecture, seed: u64, dtype: DType) -> Result<Self> {
        let (r, d) = random_frozen_models(seed, dtype)?;
        Self::new(r.net, d.net, arch, seed, dtype)
    }

    pub fn vat_forward(&self, i_lq: &Tensor, i_r: &Tensor) -> candle_core::Result<VatOutput> {
        self.vat.forward(i_lq, i_r)
    }

    /// Parameters the optimizer may touch. Gate parameters are excluded when
    /// the gate is disabled, since they never enter the graph.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let gate_enabled = self.vat.arch.gate_enabled;
        let mut named: Vec<(String, Var)> = Vec::new();
        for vm in [&self.theta_a, &self.theta_b] {
            let data = vm.data().lock().expect("varmap lock poisoned");
            named.extend(
                data.iter()
                    .filter(|(k, _)| gate_enabled || !k.starts_with("gate."))
                    .map(|(k, v)| (k.clone(), v.clone())),
            );
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));
        named.into_iter().map(|(_, v)| v).collect()
    }

    /// Writes `F_VaT^A` (gate and `T_A`) only.
    pub fn save_translator(&self, path: &Path, mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
        meta.role = ModelRole::Translator;
        meta.architecture = serde_json::to_value(self.vat.arch)?;
        checkpoint::save(&self.theta_a, "", path, meta)
    }
}

/// Untrained frozen restorer and classifier with default architectures,
/// drawn from `seed`.
pub fn random_frozen_models(seed: u64, dtype: DType) -> Result<(FrozenRestorer, FrozenClassifier)> {
    let frozen = VarMap::new();
    let vb = seeded_var_builder(&frozen, seed.wrapping_add(100), dtype, &Device::Cpu);
    Restorer::new(RestorerConfig::default(), vb.pp("r"))?;
    TaskClassifier::new(ClassifierConfig::default(), vb.pp("d"))?;
    let r_meta = CheckpointMeta::new(ModelRole::Restoration, &RestorerConfig::default(), seed)?;
    let d_meta = CheckpointMeta::new(ModelRole::Task, &ClassifierConfig::default(), seed)?;
    Ok((
        FrozenRestorer::from_varmap(&frozen, "r", r_meta, dtype)?,
        FrozenClassifier::from_varmap(&frozen, "d", d_meta, dtype)?,
    ))
}

/// Edge-replicates `img` so both spatial dims are multiples of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        for x in 0..pw {
            for ch in 0..c {
                data.push(img.get(y.min(h - 1), x.min(w - 1), ch));
            }
        }
    }
    ImageTensor::new(ph, pw, c, data)
}
