//! Test-set evaluation of the three inference pipelines.

use std::fmt;
use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::metrics;
use crate::error::{Result, VatError};
use crate::image::ImageTensor;
use crate::nets::bundle::{FrozenClassifier, FrozenRestorer, VatTranslator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "degraded-direct")]
    DegradedDirect,
    #[serde(rename = "restored-direct")]
    RestoredDirect,
    #[serde(rename = "vat-translated")]
    VatTranslated,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::DegradedDirect => "degraded-direct",
            Pipeline::RestoredDirect => "restored-direct",
            Pipeline::VatTranslated => "vat-translated",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub pipeline: Pipeline,
    pub accuracy: f64,
    /// Macro average of one-vs-rest ROC AUCs.
    pub auc: f64,
    /// Mean PSNR and SSIM of the images fed to the classifier against the
    /// paired clean test images.
    pub psnr: f64,
    pub ssim: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_fingerprint: String,
    pub samples: usize,
    pub pipelines: Vec<PipelineMetrics>,
}

impl EvalReport {
    pub fn get(&self, pipeline: Pipeline) -> Option<&PipelineMetrics> {
        self.pipelines.iter().find(|p| p.pipeline == pipeline)
    }

    pub fn accuracy(&self, pipeline: Pipeline) -> Option<f64> {
        self.get(pipeline).map(|p| p.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pipeline,accuracy,auc,psnr,ssim,seed,config_fingerprint\n");
        for p in &self.pipelines {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.pipeline, p.accuracy, p.auc, p.psnr, p.ssim, self.seed, self.config_fingerprint
            ));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| VatError::io(format!("creating {}", dir.display()), e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| VatError::io(format!("writing {}", csv.display()), e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| VatError::io(format!("writing {}", json.display()), e))?;
        Ok(())
    }
}

/// Class probabilities of the classifier on a set of images, also returning
/// them for ROC plotting.
pub fn classify(classifier: &FrozenClassifier, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    classifier
        .predict(images)?
        .into_iter()
        .map(|p| {
            p.probs()
                .map(<[f64]>::to_vec)
                .ok_or_else(|| VatError::KindMismatch("classifier produced a non-classification output".into()))
        })
        .collect()
}

pub fn pipeline_metrics(
    pipeline: Pipeline,
    probs: &[Vec<f64>],
    labels: &[usize],
    inputs: &[ImageTensor],
    clean: &[ImageTensor],
    classes: usize,
) -> Result<PipelineMetrics> {
    if inputs.len() != clean.len() {
        return Err(VatError::ShapeMismatch(format!("{} inputs vs {} clean images", inputs.len(), clean.len())));
    }
    let (per_class_auc, auc) = metrics::macro_auc(probs, labels, classes)?;
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for (a, b) in inputs.iter().zip(clean) {
        psnr += metrics::psnr(a, b)?;
        ssim += metrics::ssim(a, b)?;
    }
    let n = inputs.len().max(1) as f64;
    Ok(PipelineMetrics {
        pipeline,
        accuracy: metrics::accuracy(probs, labels)?,
        auc,
        psnr: psnr / n,
        ssim: ssim / n,
        per_class_accuracy: metrics::per_class_accuracy(probs, labels, classes),
        per_class_auc,
    })
}

/// Inputs of a test-set evaluation: degraded images, their restorations,
/// the paired clean images and labels.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub degraded: Vec<ImageTensor>,
    pub restored: Vec<ImageTensor>,
    pub clean: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl TestSet {
    pub fn new(
        restorer: &FrozenRestorer,
        degraded: Vec<ImageTensor>,
        clean: Vec<ImageTensor>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if degraded.len() != clean.len() || degraded.len() != labels.len() {
            return Err(VatError::ShapeMismatch("test images, targets and labels differ in length".into()));
        }
        if degraded.is_empty() {
            return Err(VatError::Empty("empty test set".into()));
        }
        let restored = restorer.restore(&degraded)?;
        Ok(Self {
            degraded,
            restored,
            clean,
            labels,
        })
    }
}

/// Per-pipeline probabilities kept alongside the report for plotting.
#[derive(Debug, Clone)]
pub struct PipelineScores {
    pub pipeline: Pipeline,
    pub probs: Vec<Vec<f64>>,
}

/// Evaluates the direct baselines and, when a translator is given, the
/// translated pipeline.
pub fn evaluate(
    classifier: &FrozenClassifier,
    vat: Option<&VatTranslator>,
    test: &TestSet,
    seed: u64,
    config_fingerprint: &str,
) -> Result<(EvalReport, Vec<PipelineScores>)> {
    let classes = classifier.net.config().classes;
    let mut inputs: Vec<(Pipeline, Vec<ImageTensor>)> = vec![
        (Pipeline::DegradedDirect, test.degraded.clone()),
        (Pipeline::RestoredDirect, test.restored.clone()),
    ];
    if let Some(vat) = vat {
        inputs.push((Pipeline::VatTranslated, vat.translate(&test.degraded, &test.restored, DType::F32)?));
    }
    let mut pipelines = Vec::new();
    let mut scores = Vec::new();
    for (pipeline, images) in inputs {
        let probs = classify(classifier, &images)?;
        pipelines.push(pipeline_metrics(pipeline, &probs, &test.labels, &images, &test.clean, classes)?);
        scores.push(PipelineScores { pipeline, probs });
    }
    Ok((
        EvalReport {
            seed,
            config_fingerprint: config_fingerprint.to_string(),
            samples: test.labels.len(),
            pipelines,
        },
        scores,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_pipeline_metrics() {
        let img = ImageTensor::filled(16, 16, 3, 0.4).unwrap();
        let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]];
        let labels = vec![0, 1, 0];
        let inputs = vec![img.clone(); 3];
        let m = pipeline_metrics(Pipeline::RestoredDirect, &probs, &labels, &inputs, &inputs, 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.psnr, 100.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_names_pipelines() {
        let report = EvalReport {
            seed: 3,
            config_fingerprint: "abc".into(),
            samples: 0,
            pipelines: vec![PipelineMetrics {
                pipeline: Pipeline::VatTranslated,
                accuracy: 0.5,
                auc: 0.6,
                psnr: 20.0,
                ssim: 0.7,
                per_class_accuracy: vec![],
                per_class_auc: vec![],
            }],
        };
        let csv = report.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("vat-translated,0.5,0.6,20,0.7,3,abc"));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"vat-translated\""));
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path(), "eval").unwrap();
        let back: EvalReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
