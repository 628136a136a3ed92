//! Training of the frozen stand-ins: the task classifier on clean images and
//! the restorer on paired degraded/clean images.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::{FrozenClassifier, FrozenRestorer};
use super::checkpoint::{self, CheckpointMeta, ModelRole};
use super::classifier::{ClassifierConfig, TaskClassifier};
use super::init::seeded_var_builder;
use super::ops;
use super::restorer::{Restorer, RestorerConfig};
use crate::error::{Result, VatError};
use crate::eval::metrics;
use crate::image::ImageTensor;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskPretrainConfig {
    pub arch: ClassifierConfig,
    pub optim: OptimConfig,
    /// Random horizontal flips.
    pub flip: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
        }
    }
}

impl Default for TaskPretrainConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierConfig::default(),
            optim: OptimConfig::default(),
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorerPretrainConfig {
    pub arch: RestorerConfig,
    pub optim: OptimConfig,
    /// Fractions of the total iteration count at which intermediate
    /// checkpoints are kept for the restoration-quality sweep.
    pub snapshots: Vec<f64>,
}

impl Default for RestorerPretrainConfig {
    fn default() -> Self {
        Self {
            arch: RestorerConfig::default(),
            optim: OptimConfig {
                epochs: 6,
                batch_size: 16,
                learning_rate: 2e-3,
                weight_decay: 0.0,
            },
            snapshots: vec![0.02, 0.08, 0.25],
        }
    }
}

fn validate(optim: &OptimConfig) -> Result<()> {
    if optim.epochs == 0 || optim.batch_size == 0 || optim.learning_rate <= 0.0 || optim.weight_decay < 0.0 {
        return Err(VatError::Config(format!("invalid optimizer settings {optim:?}")));
    }
    Ok(())
}

fn optimizer(varmap: &VarMap, optim: &OptimConfig) -> Result<AdamW> {
    let mut vars: Vec<_> = varmap.data().lock().expect("varmap lock poisoned").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    let params = ParamsAdamW {
        lr: optim.learning_rate,
        weight_decay: optim.weight_decay,
        ..Default::default()
    };
    Ok(AdamW::new(vars.into_iter().map(|(_, v)| v).collect(), params)?)
}

/// Shuffled minibatches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let (h, w, c) = img.dims();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in (0..w).rev() {
            let start = (y * w + x) * c;
            data.extend_from_slice(&img.data()[start..start + c]);
        }
    }
    ImageTensor::new(h, w, c, data).expect("flip preserves shape")
}

fn stack(images: &[ImageTensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &images[i]).collect();
    ImageTensor::batch_to_tensor(&refs, DType::F32, &Device::Cpu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPretrainReport {
    pub clean_train_accuracy: f64,
    pub clean_test_accuracy: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Trains the classifier on `train` and writes `<out>/classifier.safetensors`.
pub fn pretrain_task(
    train: &Dataset,
    test: &Dataset,
    config: &TaskPretrainConfig,
    seed: u64,
    out: &Path,
) -> Result<(FrozenClassifier, TaskPretrainReport)> {
    validate(&config.optim)?;
    if train.is_empty() || test.is_empty() {
        return Err(VatError::Empty("task pretraining needs nonempty train and test splits".into()));
    }
    let dev = Device::Cpu;
    let varmap = VarMap::new();
    let net = TaskClassifier::new(config.arch.clone(), seeded_var_builder(&varmap, seed, DType::F32, &dev))?;
    let mut opt = optimizer(&varmap, &config.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c);
    let labels = train.labels();
    let classes = config.arch.classes;
    let mut final_loss = f64::NAN;
    for epoch in 0..config.optim.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), config.optim.batch_size, &mut rng);
        for idx in &batches {
            let imgs: Vec<ImageTensor> = idx
                .iter()
                .map(|&i| {
                    if config.flip && rand::Rng::gen_bool(&mut rng, 0.5) {
                        flip_horizontal(&train.images[i])
                    } else {
                        train.images[i].clone()
                    }
                })
                .collect();
            let all: Vec<usize> = (0..imgs.len()).collect();
            let x = stack(&imgs, &all)?;
            let y: Vec<u32> = idx.iter().map(|&i| labels[i] as u32).collect();
            let y = Tensor::new(y, &dev)?;
            let onehot = candle_nn::encoding::one_hot(y, classes, 1f32, 0f32)?;
            let loss = ops::soft_cross_entropy(&net.forward(&x)?.logits, &onehot)?.mean_all()?;
            opt.backward_step(&loss)?;
            sum += loss.to_scalar::<f32>()? as f64;
        }
        final_loss = sum / batches.len() as f64;
        info!("task pretrain epoch {epoch}: loss {final_loss:.4}");
    }
    let mut meta = CheckpointMeta::new(ModelRole::Task, &config.arch, seed)?;
    meta.dataset_fingerprint = Some(train.fingerprint.clone());
    let frozen = FrozenClassifier::from_varmap(&varmap, "", meta.clone(), DType::F32)?;
    let acc = |ds: &Dataset| -> Result<f64> {
        let preds = frozen.predict(&ds.images)?;
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs().unwrap_or_default().to_vec()).collect();
        metrics::accuracy(&probs, &ds.labels())
    };
    let clean_train_accuracy = acc(&train.truncated(1000))?;
    let clean_test_accuracy = acc(test)?;
    meta.metrics.insert("clean_train_accuracy".into(), clean_train_accuracy);
    meta.metrics.insert("clean_test_accuracy".into(), clean_test_accuracy);
    meta.metrics.insert("final_loss".into(), final_loss);
    let path = out.join("classifier.safetensors");
    let meta = checkpoint::save(&varmap, "", &path, meta)?;
    info!("task stub clean-test accuracy {clean_test_accuracy:.4}");
    let frozen = FrozenClassifier::load(&path, DType::F32)?;
    debug_assert_eq!(frozen.meta, meta);
    Ok((
        frozen,
        TaskPretrainReport {
            clean_train_accuracy,
            clean_test_accuracy,
            final_loss,
            checkpoint: path,
        },
    ))
}

/// Mean PSNR of `images` against `targets`.
pub fn mean_psnr(images: &[ImageTensor], targets: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(VatError::ShapeMismatch(format!("{} images vs {} targets", images.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (a, b) in images.iter().zip(targets) {
        sum += metrics::psnr(a, b)?;
    }
    Ok(sum / images.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationQuality {
    /// PSNR of the restorer on its own validation range.
    pub val_psnr: f64,
    /// PSNR of the unprocessed degraded images on the same range.
    pub val_psnr_identity: f64,
    /// Same pair on the disjoint range of the downstream degraded data.
    pub gap_psnr: f64,
    pub gap_psnr_identity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorerPretrainReport {
    pub quality: RestorationQuality,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    /// Intermediate checkpoints in training order, each with its validation PSNR.
    pub snapshots: Vec<(PathBuf, f64)>,
}

fn paired(ds: &Dataset) -> Result<&[ImageTensor]> {
    ds.targets
        .as_deref()
        .ok_or_else(|| VatError::Precondition(format!("split {:?} has no paired targets", ds.split())))
}

fn evaluate_restorer(net: &FrozenRestorer, val: &Dataset, gap: &Dataset) -> Result<RestorationQuality> {
    let val_t = paired(val)?;
    let gap_t = paired(gap)?;
    Ok(RestorationQuality {
        val_psnr: mean_psnr(&net.restore(&val.images)?, val_t)?,
        val_psnr_identity: mean_psnr(&val.images, val_t)?,
        gap_psnr: mean_psnr(&net.restore(&gap.images)?, gap_t)?,
        gap_psnr_identity: mean_psnr(&gap.images, gap_t)?,
    })
}

fn quality_metrics(meta: &mut CheckpointMeta, q: &RestorationQuality) {
    meta.metrics.insert("val_psnr".into(), q.val_psnr);
    meta.metrics.insert("val_psnr_identity".into(), q.val_psnr_identity);
    meta.metrics.insert("gap_psnr".into(), q.gap_psnr);
    meta.metrics.insert("gap_psnr_identity".into(), q.gap_psnr_identity);
}

/// Trains the restorer with an L1 loss on `pretrain` pairs and writes
/// `<out>/restorer.safetensors` plus snapshot checkpoints under
/// `<out>/restorer_snapshots/`. `gap` is a paired split from the downstream
/// degradation range, used only for measurement.
pub fn pretrain_restorer(
    pretrain: &Dataset,
    val: &Dataset,
    gap: &Dataset,
    config: &RestorerPretrainConfig,
    seed: u64,
    out: &Path,
) -> Result<(FrozenRestorer, RestorerPretrainReport)> {
    validate(&config.optim)?;
    let targets = paired(pretrain)?;
    if pretrain.is_empty() {
        return Err(VatError::Empty("restoration pretraining split is empty".into()));
    }
    let dev = Device::Cpu;
    let varmap = VarMap::new();
    let net = Restorer::new(config.arch, seeded_var_builder(&varmap, seed, DType::F32, &dev))?;
    let mut opt = optimizer(&varmap, &config.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e57);
    let per_epoch = pretrain.len().div_ceil(config.optim.batch_size);
    let total = per_epoch * config.optim.epochs;
    let mut marks: Vec<usize> = config
        .snapshots
        .iter()
        .map(|f| ((f * total as f64).round() as usize).clamp(1, total))
        .collect();
    marks.sort_unstable();
    marks.dedup();
    let mut snapshots = Vec::new();
    let mut step = 0;
    let mut final_loss = f64::NAN;
    let snapshot_dir = out.join("restorer_snapshots");
    for epoch in 0..config.optim.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(pretrain.len(), config.optim.batch_size, &mut rng);
        for idx in &batches {
            let x = stack(&pretrain.images, idx)?;
            let y = stack(targets, idx)?;
            let loss = ops::l1_mean(&net.forward(&x)?, &y)?;
            opt.backward_step(&loss)?;
            sum += loss.to_scalar::<f32>()? as f64;
            step += 1;
            if marks.contains(&step) && step < total {
                let mut meta = CheckpointMeta::new(ModelRole::Restoration, &config.arch, seed)?;
                meta.dataset_fingerprint = Some(pretrain.fingerprint.clone());
                let frozen = FrozenRestorer::from_varmap(&varmap, "", meta.clone(), DType::F32)?;
                let q = evaluate_restorer(&frozen, val, gap)?;
                quality_metrics(&mut meta, &q);
                meta.metrics.insert("iteration".into(), step as f64);
                let path = snapshot_dir.join(format!("step{step:06}.safetensors"));
                checkpoint::save(&varmap, "", &path, meta)?;
                snapshots.push((path, q.val_psnr));
            }
        }
        final_loss = sum / batches.len() as f64;
        info!("restorer pretrain epoch {epoch}: l1 {final_loss:.4}");
    }
    let mut meta = CheckpointMeta::new(ModelRole::Restoration, &config.arch, seed)?;
    meta.dataset_fingerprint = Some(pretrain.fingerprint.clone());
    let frozen = FrozenRestorer::from_varmap(&varmap, "", meta.clone(), DType::F32)?;
    let quality = evaluate_restorer(&frozen, val, gap)?;
    quality_metrics(&mut meta, &quality);
    meta.metrics.insert("iteration".into(), total as f64);
    meta.metrics.insert("final_loss".into(), final_loss);
    let path = out.join("restorer.safetensors");
    checkpoint::save(&varmap, "", &path, meta)?;
    info!(
        "restorer: val PSNR {:.2} (identity {:.2}), downstream-range PSNR {:.2} (identity {:.2})",
        quality.val_psnr, quality.val_psnr_identity, quality.gap_psnr, quality.gap_psnr_identity
    );
    Ok((
        FrozenRestorer::load(&path, DType::F32)?,
        RestorerPretrainReport {
            quality,
            final_loss,
            checkpoint: path,
            snapshots,
        },
    ))
}

/// Argmax class of each row of `N×K` logits.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let idx: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    Ok(idx.into_iter().map(|i| i as usize).collect())
}
