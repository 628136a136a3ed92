//! Self-training loop of the translator: cycle consistency on unpaired
//! degraded/clean streams, pseudo-labelled mixup, and the task loss through
//! the frozen classifier.

pub mod gradcheck;
pub mod losses;
pub mod mixup;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{cycle_loss, mle_loss, step_losses, LossBreakdown, LossWeights, MixBatch, StepBatch};
pub use mixup::{mix_labels, mixup, MixupMode};

use crate::error::{Result, VatError};
use crate::eval::metrics;
use crate::fingerprint;
use crate::image::ImageTensor;
use crate::nets::bundle::{FrozenClassifier, FrozenRestorer, ModelBundle, VatArchitecture};
use crate::nets::checkpoint::{CheckpointMeta, ModelRole};
use crate::nets::translator::configure_identity;
use crate::pseudolabel::{self, LabelPayload, PseudoLabel, SoftLabel};
use crate::synthdata::Dataset;
use crate::uncertainty::ReferenceBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorInit {
    Random,
    /// Both transformation modules start as the identity map.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// AdamW decoupled weight decay; the remaining AdamW settings are the
    /// library defaults.
    pub weight_decay: f64,
    /// `λ ~ Beta(α, α)`.
    pub alpha: f64,
    /// Pseudo-labels are kept when `u < epsilon`.
    pub epsilon: f64,
    pub weights: LossWeights,
    pub mixup: MixupMode,
    pub arch: VatArchitecture,
    pub init: TranslatorInit,
    pub seed: u64,
    /// Stops after this many iterations in total, if set.
    pub max_iterations: Option<usize>,
    /// Degraded-test images scored after every epoch for monitoring only.
    pub validation_samples: usize,
    pub dump_pseudo: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 50,
            weight_decay: 0.01,
            alpha: 1.0,
            epsilon: pseudolabel::DEFAULT_EPSILON,
            weights: LossWeights::default(),
            mixup: MixupMode::Uncertainty,
            arch: VatArchitecture::default(),
            init: TranslatorInit::Random,
            seed: 0,
            max_iterations: None,
            validation_samples: 200,
            dump_pseudo: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(VatError::Config(format!("invalid training config: {what}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad("epsilon must lie in (0, 1]");
        }
        if self.weights.cyc < 0.0 || self.weights.mle < 0.0 || self.weight_decay < 0.0 {
            return bad("loss weights and weight decay must be nonnegative");
        }
        if self.max_iterations == Some(0) {
            return bad("max_iterations must be positive when set");
        }
        Ok(())
    }
}

/// Training inputs with everything the frozen models contribute computed
/// once up front: restorations, merged pseudo-labels with uncertainty, and
/// clean soft labels. Since `R`, `D` and the bank never change this matches
/// recomputing them per iteration.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub degraded: Vec<ImageTensor>,
    pub restored: Vec<ImageTensor>,
    pub degraded_ids: Vec<String>,
    pub pseudo: Vec<PseudoLabel>,
    pub clean: Vec<ImageTensor>,
    pub clean_labels: Vec<SoftLabel>,
    pub degraded_fingerprint: String,
    pub clean_fingerprint: String,
}

impl TrainingSet {
    pub fn prepare(
        classifier: &FrozenClassifier,
        restorer: &FrozenRestorer,
        bank: &ReferenceBank,
        degraded: &Dataset,
        clean: &Dataset,
        epsilon: f64,
    ) -> Result<Self> {
        if degraded.is_empty() || clean.is_empty() {
            return Err(VatError::Empty("training needs nonempty degraded and clean splits".into()));
        }
        let restored = restorer.restore(&degraded.images)?;
        let pseudo = pseudolabel::label_degraded(classifier, bank, &degraded.images, &restored, epsilon)?;
        let clean_labels = pseudolabel::clean_labels(classifier, bank, &clean.images)?
            .into_iter()
            .map(|(l, _)| l)
            .collect();
        Ok(Self {
            degraded: degraded.images.clone(),
            restored,
            degraded_ids: degraded.records.iter().map(|r| r.id.clone()).collect(),
            pseudo,
            clean: clean.images.clone(),
            clean_labels,
            degraded_fingerprint: degraded.fingerprint.clone(),
            clean_fingerprint: clean.fingerprint.clone(),
        })
    }

    pub fn kept_fraction(&self) -> f64 {
        self.pseudo.iter().filter(|p| p.kept).count() as f64 / self.pseudo.len().max(1) as f64
    }
}

/// Degraded images with their restorations and labels, for monitoring.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub degraded: Vec<ImageTensor>,
    pub restored: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub mixed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iterations: usize,
    pub mean_total: f64,
    pub validation_accuracy: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub restorer: String,
    pub classifier: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub degraded_fingerprint: String,
    pub clean_fingerprint: String,
    pub restorer_fingerprint: String,
    pub classifier_fingerprint: String,
    pub kept_fraction: f64,
    pub iterations: usize,
    pub epochs: Vec<EpochSummary>,
    pub frozen_before: FrozenChecksums,
    pub frozen_after: FrozenChecksums,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<HistoryRow>,
    pub record: RunRecord,
}

pub fn frozen_checksums(bundle: &ModelBundle) -> Result<FrozenChecksums> {
    Ok(FrozenChecksums {
        restorer: fingerprint::of_tensors(&bundle.restorer.parameters())?,
        classifier: fingerprint::of_tensors(&bundle.classifier.parameters())?,
    })
}

pub const HISTORY_HEADER: &str = "iteration,cyc_forward,cyc_backward,mle_clean,mle_mix,total";

fn history_line(row: &HistoryRow) -> String {
    let l = &row.loss;
    format!(
        "{},{},{},{},{},{}",
        row.iteration, l.cyc_forward, l.cyc_backward, l.mle_clean, l.mle_mix, l.total
    )
}

/// Stacks the selected images into an `N×H×W×C` tensor.
pub fn stack(images: &[ImageTensor], rows: &[usize], dtype: DType) -> Result<Tensor> {
    let refs: Vec<&ImageTensor> = rows.iter().map(|&i| &images[i]).collect();
    ImageTensor::batch_to_tensor(&refs, dtype, &Device::Cpu)
}

fn soft_rows(labels: &[Vec<f64>], dtype: DType) -> Result<Tensor> {
    let k = labels.first().map_or(0, Vec::len);
    let flat: Vec<f64> = labels.concat();
    Ok(Tensor::from_vec(flat, (labels.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Builds the step inputs for degraded rows `lq` and clean rows `hq`,
/// drawing one `λ` per kept pseudo-label from `rng`. Returns the batch and
/// the number of samples skipped for zero label mass.
pub fn build_step_batch(
    set: &TrainingSet,
    lq: &[usize],
    hq: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    dtype: DType,
) -> Result<(StepBatch, usize)> {
    let n = lq.len().min(hq.len());
    let (lq, hq) = (&lq[..n], &hq[..n]);
    let y_hq: Vec<Vec<f64>> = hq.iter().map(|&j| set.clean_labels[j].probs.clone()).collect();
    let mut rows = Vec::new();
    let mut lambdas = Vec::new();
    let mut targets = Vec::new();
    let mut skipped = 0;
    for (k, (&i, &j)) in lq.iter().zip(hq).enumerate() {
        let pl = &set.pseudo[i];
        if !pl.kept {
            continue;
        }
        let LabelPayload::Soft(soft) = &pl.label else {
            return Err(VatError::KindMismatch("training expects classification pseudo-labels".into()));
        };
        let lambda = config.mixup.sample_lambda(config.alpha, rng)?;
        let (c_lq, c_hq) = config.mixup.certainties(pl.u, set.clean_labels[j].weight);
        match mix_labels(&soft.probs, c_lq, &set.clean_labels[j].probs, c_hq, lambda)? {
            Some(y) => {
                rows.push(k as u32);
                lambdas.push(lambda);
                targets.push(y);
            }
            None => skipped += 1,
        }
    }
    let mix = if rows.is_empty() {
        None
    } else {
        Some(MixBatch {
            rows,
            lambdas,
            targets: soft_rows(&targets, dtype)?,
        })
    };
    Ok((
        StepBatch {
            i_lq: stack(&set.degraded, lq, dtype)?,
            i_r: stack(&set.restored, lq, dtype)?,
            i_hq: stack(&set.clean, hq, dtype)?,
            y_hq: soft_rows(&y_hq, dtype)?,
            mix,
        },
        skipped,
    ))
}

/// Accuracy of the frozen classifier on translated images.
pub fn translated_accuracy(bundle: &ModelBundle, val: &ValidationSet) -> Result<f64> {
    let translated = bundle.vat.translate(&val.degraded, &val.restored, DType::F32)?;
    let mut probs = Vec::with_capacity(translated.len());
    for chunk in translated.chunks(crate::nets::bundle::INFER_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = ImageTensor::batch_to_tensor(&refs, DType::F32, &Device::Cpu)?;
        let out = bundle.classifier.forward(&x)?;
        for p in crate::nets::bundle::predictions_from_output(&out)? {
            probs.push(p.probs().map(<[f64]>::to_vec).unwrap_or_default());
        }
    }
    metrics::accuracy(&probs, &val.labels)
}

/// Runs the training loop, writing `history.csv`, per-epoch checkpoints,
/// `vat.safetensors` and `run.json` under `out`.
pub fn train(
    config: &TrainConfig,
    set: &TrainingSet,
    restorer: &FrozenRestorer,
    classifier: &FrozenClassifier,
    validation: Option<&ValidationSet>,
    out: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| VatError::io(format!("creating {}", out.display()), e))?;
    let dtype = DType::F32;
    let bundle = ModelBundle::new(restorer.net.clone(), classifier.net.clone(), config.arch, config.seed, dtype)?;
    if config.init == TranslatorInit::Identity {
        configure_identity(&bundle.theta_a, "t_a", &config.arch.translator)?;
        configure_identity(&bundle.theta_b, "t_b", &config.arch.translator)?;
    }
    if bundle.restorer.parameters().iter().chain(&bundle.classifier.parameters()).any(|t| t.is_variable()) {
        return Err(VatError::Precondition("frozen models must not hold trainable variables".into()));
    }
    let frozen_before = frozen_checksums(&bundle)?;
    let params = ParamsAdamW {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(bundle.trainable_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);

    let history_path = out.join("history.csv");
    let mut history_file = fs::File::create(&history_path)
        .map_err(|e| VatError::io(format!("creating {}", history_path.display()), e))?;
    writeln!(history_file, "{HISTORY_HEADER}").map_err(|e| VatError::io("writing history", e))?;
    let pseudo_path = out.join("pseudo_labels.jsonl");
    if config.dump_pseudo && pseudo_path.exists() {
        fs::remove_file(&pseudo_path).map_err(|e| VatError::io("clearing pseudo-label dump", e))?;
    }

    let per_epoch = (set.degraded.len() / config.batch_size).max(1);
    let budget = config.max_iterations.unwrap_or(usize::MAX);
    let mut clean_order: Vec<usize> = Vec::new();
    let mut clean_pos = 0;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut iteration = 0;
    let mut skipped_total = 0;
    let meta_base = CheckpointMeta {
        role: ModelRole::Translator,
        architecture: serde_json::to_value(config.arch)?,
        dataset_fingerprint: Some(set.degraded_fingerprint.clone()),
        seed: config.seed,
        metrics: Default::default(),
        weights_sha256: String::new(),
    };

    'epochs: for epoch in 0..config.epochs {
        if config.dump_pseudo {
            pseudolabel::dump_jsonl(&pseudo_path, epoch, &set.degraded_ids, &set.pseudo)?;
        }
        let mut order: Vec<usize> = (0..set.degraded.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_iters = 0;
        for b in 0..per_epoch {
            if iteration >= budget {
                break;
            }
            let lq: Vec<usize> = order.iter().cycle().skip(b * config.batch_size).take(config.batch_size).copied().collect();
            let mut hq = Vec::with_capacity(config.batch_size);
            while hq.len() < config.batch_size {
                if clean_pos == clean_order.len() {
                    clean_order = (0..set.clean.len()).collect();
                    clean_order.shuffle(&mut rng);
                    clean_pos = 0;
                }
                hq.push(clean_order[clean_pos]);
                clean_pos += 1;
            }
            let (batch, skipped) = build_step_batch(set, &lq, &hq, config, &mut rng, dtype)?;
            skipped_total += skipped;
            let losses = step_losses(&bundle, &batch, &config.weights)?;
            let loss = losses.breakdown()?;
            if !loss.is_finite() {
                return Err(VatError::NonFiniteLoss {
                    iteration,
                    detail: format!("{loss:?}"),
                });
            }
            if config.weights.cyc != 0.0 || config.weights.mle != 0.0 {
                opt.backward_step(&losses.total)?;
            }
            let row = HistoryRow {
                iteration,
                loss,
                mixed: batch.mix.as_ref().map_or(0, |m| m.rows.len()),
            };
            writeln!(history_file, "{}", history_line(&row)).map_err(|e| VatError::io("writing history", e))?;
            if iteration % 50 == 0 {
                info!(
                    "iter {iteration}: cyc {:.4}/{:.4} mle {:.4}/{:.4} total {:.4}",
                    loss.cyc_forward, loss.cyc_backward, loss.mle_clean, loss.mle_mix, loss.total
                );
            }
            epoch_sum += loss.total;
            epoch_iters += 1;
            history.push(row);
            iteration += 1;
        }
        if epoch_iters == 0 {
            break 'epochs;
        }
        let validation_accuracy = match validation {
            Some(v) if config.validation_samples > 0 => {
                let n = config.validation_samples.min(v.labels.len());
                let sub = ValidationSet {
                    degraded: v.degraded[..n].to_vec(),
                    restored: v.restored[..n].to_vec(),
                    labels: v.labels[..n].to_vec(),
                };
                Some(translated_accuracy(&bundle, &sub)?)
            }
            _ => None,
        };
        let mut meta = meta_base.clone();
        meta.metrics.insert("epoch".into(), epoch as f64);
        if let Some(acc) = validation_accuracy {
            meta.metrics.insert("validation_accuracy".into(), acc);
        }
        let ckpt = out.join("checkpoints").join(format!("epoch{epoch:03}.safetensors"));
        bundle.save_translator(&ckpt, meta)?;
        let summary = EpochSummary {
            epoch,
            iterations: epoch_iters,
            mean_total: epoch_sum / epoch_iters as f64,
            validation_accuracy,
            checkpoint: Some(ckpt),
        };
        info!("epoch {epoch}: mean loss {:.4}, validation {:?}", summary.mean_total, validation_accuracy);
        epochs.push(summary);
        if iteration >= budget {
            break;
        }
    }
    if skipped_total > 0 {
        warn!("{skipped_total} mixup samples skipped for zero label mass");
    }
    history_file.flush().map_err(|e| VatError::io("writing history", e))?;

    let frozen_after = frozen_checksums(&bundle)?;
    let mut meta = meta_base;
    meta.metrics.insert("iterations".into(), iteration as f64);
    let final_path = out.join("vat.safetensors");
    let saved = bundle.save_translator(&final_path, meta)?;
    let record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        degraded_fingerprint: set.degraded_fingerprint.clone(),
        clean_fingerprint: set.clean_fingerprint.clone(),
        restorer_fingerprint: restorer.meta.weights_sha256.clone(),
        classifier_fingerprint: classifier.meta.weights_sha256.clone(),
        kept_fraction: set.kept_fraction(),
        iterations: iteration,
        epochs,
        frozen_before,
        frozen_after,
        checkpoint: final_path,
        checkpoint_sha256: saved.weights_sha256,
    };
    let run_path = out.join("run.json");
    fs::write(&run_path, serde_json::to_string_pretty(&record)?)
        .map_err(|e| VatError::io(format!("writing {}", run_path.display()), e))?;
    Ok(TrainOutcome {
        bundle,
        history,
        record,
    })
}
