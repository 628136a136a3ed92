//! End-to-end orchestration: data generation, stub pretraining, reference
//! bank, translator training and test-set evaluation.
//!
//! Directory layout of one run:
//!
//! ```text
//! <data>/...                         generated splits (see synthdata)
//! <out>/models/classifier.safetensors
//! <out>/models/restorer.safetensors
//! <out>/models/restorer_snapshots/
//! <out>/models/bank.bin (+ bank.json)
//! <out>/train/                       history.csv, run.json, vat.safetensors
//! <out>/eval/                        eval.csv, eval.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};
use crate::eval::report::{self, EvalReport, TestSet};
use crate::fingerprint;
use crate::image::ImageTensor;
use crate::nets::bundle::{FrozenClassifier, FrozenRestorer};
use crate::nets::pretrain::{self, RestorerPretrainConfig, RestorerPretrainReport, TaskPretrainConfig, TaskPretrainReport};
use crate::synthdata::{self, DataConfig, Dataset, SplitName};
use crate::trainer::{self, TrainConfig, TrainOutcome, TrainingSet, ValidationSet};
use crate::uncertainty::{self, ReferenceBank, UncertaintyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; see [`ExperimentConfig::with_seed`].
    pub seed: u64,
    pub data: DataConfig,
    pub task: TaskPretrainConfig,
    pub restorer: RestorerPretrainConfig,
    pub uncertainty: UncertaintyConfig,
    pub train: TrainConfig,
    /// Reference-bank size drawn from the clean training split.
    pub bank_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            task: TaskPretrainConfig::default(),
            restorer: RestorerPretrainConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            train: TrainConfig::default(),
            bank_size: 3000,
        }
    }
}

impl ExperimentConfig {
    /// Copies `seed` into every stage that draws randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn task_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(11)
    }

    pub fn restorer_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(23)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.bank_size == 0 {
            return Err(VatError::Config("bank_size must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint::of_json(self)
    }

    /// Reads a TOML (or, by extension, JSON) config. Missing keys take
    /// their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(VatError::Config(format!("config file not found: {}", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| VatError::io(format!("reading {}", path.display()), e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }
}

pub fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

pub fn classifier_path(out: &Path) -> PathBuf {
    models_dir(out).join("classifier.safetensors")
}

pub fn restorer_path(out: &Path) -> PathBuf {
    models_dir(out).join("restorer.safetensors")
}

pub fn bank_path(out: &Path) -> PathBuf {
    models_dir(out).join("bank.bin")
}

/// Whether `root` holds every split generated with exactly `config`.
pub fn data_matches(root: &Path, config: &DataConfig) -> bool {
    SplitName::ALL.iter().all(|&s| {
        let Ok(text) = fs::read_to_string(synthdata::manifest_path(root, s)) else {
            return false;
        };
        let Some(first) = text.lines().next() else {
            return false;
        };
        matches!(
            serde_json::from_str::<synthdata::ManifestLine>(first),
            Ok(synthdata::ManifestLine::Header(h)) if h.config == *config
        )
    })
}

/// Generates the corpus unless `root` already holds it for this config.
pub fn ensure_data(config: &DataConfig, root: &Path) -> Result<()> {
    if data_matches(root, config) {
        info!("reusing data under {}", root.display());
        return Ok(());
    }
    info!("generating data under {}", root.display());
    synthdata::build_datasets(config, root)?;
    Ok(())
}

/// Every split of the corpus, loaded once.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub clean_train: Dataset,
    pub clean_test: Dataset,
    pub degraded_train: Dataset,
    pub degraded_test: Dataset,
    pub restoration_pretrain: Dataset,
    pub restoration_val: Dataset,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self {
            clean_train: synthdata::load_split(root, SplitName::CleanTrain)?,
            clean_test: synthdata::load_split(root, SplitName::CleanTest)?,
            degraded_train: synthdata::load_split(root, SplitName::DegradedTrain)?,
            degraded_test: synthdata::load_split(root, SplitName::DegradedTest)?,
            restoration_pretrain: synthdata::load_split(root, SplitName::RestorationPretrain)?,
            restoration_val: synthdata::load_split(root, SplitName::RestorationVal)?,
        })
    }

    pub fn test_targets(&self) -> Result<&[ImageTensor]> {
        self.degraded_test
            .targets
            .as_deref()
            .ok_or_else(|| VatError::Precondition("degraded test split has no clean targets".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub task: TaskPretrainReport,
    pub restorer: RestorerPretrainReport,
    pub bank_size: usize,
    pub bank_bandwidth: f64,
    pub bank_log_density_threshold: f64,
}

/// Frozen models and the reference bank of one run.
pub struct Stubs {
    pub classifier: FrozenClassifier,
    pub restorer: FrozenRestorer,
    pub bank: ReferenceBank,
}

/// Reference bank over classifier embeddings of the first `size` clean
/// training images with their true labels.
pub fn build_bank(classifier: &FrozenClassifier, clean: &Dataset, size: usize, config: UncertaintyConfig) -> Result<ReferenceBank> {
    let subset = clean.truncated(size);
    let embeddings: Vec<Vec<f32>> = classifier.predict(&subset.images)?.into_iter().map(|p| p.embedding).collect();
    ReferenceBank::build(embeddings, subset.labels(), classifier.net.config().classes, config)
}

/// Trains both stubs, builds the bank and writes them under `<out>/models`.
pub fn pretrain_stubs(config: &ExperimentConfig, corpus: &Corpus, out: &Path) -> Result<(Stubs, PretrainSummary)> {
    let dir = models_dir(out);
    fs::create_dir_all(&dir).map_err(|e| VatError::io(format!("creating {}", dir.display()), e))?;
    let (classifier, task) = pretrain::pretrain_task(&corpus.clean_train, &corpus.clean_test, &config.task, config.task_seed(), &dir)?;
    let (restorer, restorer_report) = pretrain::pretrain_restorer(
        &corpus.restoration_pretrain,
        &corpus.restoration_val,
        &corpus.degraded_test,
        &config.restorer,
        config.restorer_seed(),
        &dir,
    )?;
    let bank = build_bank(&classifier, &corpus.clean_train, config.bank_size, config.uncertainty)?;
    uncertainty::save_bank(&bank, &classifier.meta.weights_sha256, &bank_path(out))?;
    let summary = PretrainSummary {
        task,
        restorer: restorer_report,
        bank_size: bank.len(),
        bank_bandwidth: bank.bandwidth(),
        bank_log_density_threshold: bank.log_density_threshold(),
    };
    fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&summary)?)
        .map_err(|e| VatError::io("writing pretrain summary", e))?;
    Ok((
        Stubs {
            classifier,
            restorer,
            bank,
        },
        summary,
    ))
}

/// Loads previously pretrained stubs, checking the bank belongs to the
/// classifier.
pub fn load_stubs(out: &Path) -> Result<Stubs> {
    let classifier = FrozenClassifier::load(&classifier_path(out), DType::F32)?;
    let restorer = FrozenRestorer::load(&restorer_path(out), DType::F32)?;
    let bpath = bank_path(out);
    if !bpath.exists() {
        return Err(VatError::MissingCheckpoint(bpath));
    }
    let (bank, side) = uncertainty::load_bank(&bpath)?;
    if side.model_fingerprint != classifier.meta.weights_sha256 {
        return Err(VatError::FingerprintMismatch {
            path: bpath.display().to_string(),
            expected: classifier.meta.weights_sha256.clone(),
            found: side.model_fingerprint,
        });
    }
    Ok(Stubs {
        classifier,
        restorer,
        bank,
    })
}

pub fn test_set(stubs: &Stubs, corpus: &Corpus) -> Result<TestSet> {
    TestSet::new(
        &stubs.restorer,
        corpus.degraded_test.images.clone(),
        corpus.test_targets()?.to_vec(),
        corpus.degraded_test.labels(),
    )
}

pub fn validation_set(test: &TestSet) -> ValidationSet {
    ValidationSet {
        degraded: test.degraded.clone(),
        restored: test.restored.clone(),
        labels: test.labels.clone(),
    }
}

pub fn training_set(config: &TrainConfig, stubs: &Stubs, corpus: &Corpus) -> Result<TrainingSet> {
    TrainingSet::prepare(
        &stubs.classifier,
        &stubs.restorer,
        &stubs.bank,
        &corpus.degraded_train,
        &corpus.clean_train,
        config.epsilon,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainAndEval {
    pub report: EvalReport,
    pub train_seconds: f64,
    pub kept_fraction: f64,
    pub checkpoint: PathBuf,
}

/// Trains a translator with `config` and evaluates all pipelines.
pub fn train_and_evaluate(
    config: &TrainConfig,
    stubs: &Stubs,
    set: &TrainingSet,
    test: &TestSet,
    config_fingerprint: &str,
    out: &Path,
) -> Result<(TrainOutcome, TrainAndEval)> {
    let started = Instant::now();
    let validation = validation_set(test);
    let outcome = trainer::train(config, set, &stubs.restorer, &stubs.classifier, Some(&validation), out)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let (report, _) = report::evaluate(&stubs.classifier, Some(&outcome.bundle.vat), test, config.seed, config_fingerprint)?;
    let summary = TrainAndEval {
        report,
        train_seconds,
        kept_fraction: set.kept_fraction(),
        checkpoint: outcome.record.checkpoint.clone(),
    };
    Ok((outcome, summary))
}

/// Result of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub config_fingerprint: String,
    pub pretrain: PretrainSummary,
    pub result: TrainAndEval,
    pub total_seconds: f64,
}

/// Generates data (if needed), pretrains, trains and evaluates.
pub fn run(config: &ExperimentConfig, data_root: &Path, out: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    let started = Instant::now();
    ensure_data(&config.data, data_root)?;
    let corpus = Corpus::load(data_root)?;
    let (stubs, pretrain) = pretrain_stubs(config, &corpus, out)?;
    let test = test_set(&stubs, &corpus)?;
    let set = training_set(&config.train, &stubs, &corpus)?;
    let fp = config.fingerprint()?;
    let (_, result) = train_and_evaluate(&config.train, &stubs, &set, &test, &fp, &out.join("train"))?;
    result.report.write(&out.join("eval"), "eval")?;
    let outcome = ExperimentOutcome {
        seed: config.seed,
        config_fingerprint: fp,
        pretrain,
        result,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(out.join("experiment.json"), serde_json::to_string_pretty(&outcome)?)
        .map_err(|e| VatError::io("writing experiment summary", e))?;
    Ok(outcome)
}
