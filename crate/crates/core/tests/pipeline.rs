//! End-to-end runs of the library on small generated corpora.

use std::fs;
use std::path::Path;

use candle_core::DType;
use vat::eval::report::Pipeline;
use vat::experiment::{self, Corpus, ExperimentConfig};
use vat::nets::bundle::VatTranslator;
use vat::trainer::{self, TrainConfig, HISTORY_HEADER};

fn small_config(image_size: usize, clean: usize, degraded: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.image_size = image_size;
    c.data.clean_train = clean;
    c.data.degraded_train = degraded;
    c.data.restoration_pretrain = clean / 2;
    c.data.restoration_val = 16;
    c.data.test = 40;
    c.bank_size = clean;
    c.task.optim.epochs = 2;
    c.restorer.optim.epochs = 1;
    c.train = TrainConfig {
        batch_size: 4,
        epochs: 1,
        validation_samples: 8,
        ..TrainConfig::default()
    };
    c
}

#[test]
fn tiny_experiment_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(16, 80, 16);
    let outcome = experiment::run(&cfg, &dir.path().join("data"), dir.path()).unwrap();

    let report = &outcome.result.report;
    for p in [Pipeline::DegradedDirect, Pipeline::RestoredDirect, Pipeline::VatTranslated] {
        let acc = report.accuracy(p).unwrap();
        assert!((0.0..=1.0).contains(&acc), "{p}: {acc}");
    }
    assert_eq!(report.samples, 40);
    for f in ["experiment.json", "train/history.csv", "train/run.json", "eval/eval.csv", "eval/eval.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(dir.path().join("train/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some(HISTORY_HEADER));
    assert_eq!(history.lines().count(), 1 + 16 / 4);

    let run: trainer::RunRecord =
        serde_json::from_str(&fs::read_to_string(dir.path().join("train/run.json")).unwrap()).unwrap();
    assert_eq!(run.frozen_before, run.frozen_after);
    assert_eq!(run.config, cfg.train);
}

#[test]
fn saved_translator_reproduces_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(16, 60, 8);
    experiment::ensure_data(&cfg.data, &dir.path().join("data")).unwrap();
    let corpus = Corpus::load(&dir.path().join("data")).unwrap();
    let (stubs, _) = experiment::pretrain_stubs(&cfg, &corpus, dir.path()).unwrap();
    let test = experiment::test_set(&stubs, &corpus).unwrap();
    let set = experiment::training_set(&cfg.train, &stubs, &corpus).unwrap();
    let (outcome, summary) =
        experiment::train_and_evaluate(&cfg.train, &stubs, &set, &test, "fp", &dir.path().join("train")).unwrap();

    let (_, loaded) = VatTranslator::load(&summary.checkpoint, DType::F32).unwrap();
    let a = outcome.bundle.vat.translate(&test.degraded, &test.restored, DType::F32).unwrap();
    let b = loaded.translate(&test.degraded, &test.restored, DType::F32).unwrap();
    assert_eq!(a, b);

    // Reloaded stubs give the same frozen predictions.
    let reloaded = experiment::load_stubs(dir.path()).unwrap();
    let p1 = stubs.classifier.predict(&test.clean).unwrap();
    let p2 = reloaded.classifier.predict(&test.clean).unwrap();
    assert_eq!(p1, p2);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// On the 32x32 corpus with the shipped desk settings, the total loss of the
/// last 50 of the first 200 iterations is below that of the first 50.
#[test]
fn total_loss_trends_down_over_first_200_iterations() {
    let desk = ExperimentConfig::from_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let mut cfg = small_config(32, 600, 800);
    cfg.task = desk.task.clone();
    cfg.task.optim.epochs = 4;
    cfg.restorer.optim.epochs = 3;
    cfg.train = TrainConfig {
        max_iterations: Some(200),
        epochs: 1,
        validation_samples: 0,
        ..desk.train.clone()
    };
    let dir = tempfile::tempdir().unwrap();
    experiment::run(&cfg, &dir.path().join("data"), dir.path()).unwrap();
    let history = fs::read_to_string(dir.path().join("train/history.csv")).unwrap();
    let totals: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 200);
    let (first, last) = (mean(&totals[..50]), mean(&totals[150..]));
    assert!(last < first, "first-50 mean {first:.4}, last-50 mean {last:.4}");
}
