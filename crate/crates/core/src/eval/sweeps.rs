//! Experiment grids: restoration-quality sweep, translator-size sweep and
//! the component ablation.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::info;
use serde::{Deserialize, Serialize};

use super::metrics;
use super::plots::{Chart, Series};
use super::report::{Pipeline, TestSet};
use crate::error::{Result, VatError};
use crate::experiment::{self, Corpus, Stubs};
use crate::nets::bundle::FrozenRestorer;
use crate::nets::translator::parameter_count;
use crate::trainer::{MixupMode, TrainConfig, TrainingSet};

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VatError::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| VatError::io(format!("writing {}", path.display()), e))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VatError::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, text).map_err(|e| VatError::io(format!("writing {}", path.display()), e))
}

// ---------------------------------------------------------------- ablation

/// Which components a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub cycle: bool,
    pub mle: bool,
    pub gate: bool,
    pub mixup: MixupMode,
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        cycle: true,
        mle: true,
        gate: true,
        mixup: MixupMode::Uncertainty,
    };

    /// `base` with the disabled components switched off. A disabled loss
    /// gets weight zero; a disabled gate passes the restoration through.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if !self.cycle {
            cfg.weights.cyc = 0.0;
        }
        if !self.mle {
            cfg.weights.mle = 0.0;
        }
        cfg.arch.gate_enabled = self.gate;
        cfg.mixup = self.mixup;
        cfg
    }
}

/// The six ablation rows in their canonical order.
pub fn ablation_rows() -> Vec<(&'static str, AblationFlags)> {
    let row = |cycle, mle, gate, mixup| AblationFlags { cycle, mle, gate, mixup };
    vec![
        ("mle", row(false, true, false, MixupMode::Off)),
        ("cycle", row(true, false, false, MixupMode::Off)),
        ("cycle+mle", row(true, true, false, MixupMode::Off)),
        ("cycle+mle+gate", row(true, true, true, MixupMode::Off)),
        ("cycle+mle+gate+mixup", row(true, true, true, MixupMode::Plain)),
        ("cycle+mle+gate+umix", AblationFlags::FULL),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub accuracy: f64,
    pub auc: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub config_fingerprint: String,
    pub degraded_direct_accuracy: f64,
    pub restored_direct_accuracy: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Name of the row with the highest accuracy; the earliest row wins ties.
    pub fn best(&self) -> Option<&AblationRow> {
        self.rows.iter().fold(None, |best: Option<&AblationRow>, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,cycle,mle,gate,mixup,accuracy,auc,train_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.name,
                r.flags.cycle,
                r.flags.mle,
                r.flags.gate,
                serde_json::to_value(r.flags.mixup).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                r.accuracy,
                r.auc,
                r.train_seconds
            ));
        }
        out
    }
}

/// Runs one training per row (all sharing `set` and `test`) and writes
/// `ablation.csv` / `ablation.json` under `out`.
pub fn ablation_grid(
    base: &TrainConfig,
    rows: &[(&str, AblationFlags)],
    stubs: &Stubs,
    set: &TrainingSet,
    test: &TestSet,
    config_fingerprint: &str,
    out: &Path,
) -> Result<AblationTable> {
    let mut table_rows = Vec::new();
    let mut baselines = None;
    for (name, flags) in rows {
        info!("ablation row {name}");
        let cfg = flags.apply(base);
        let (_, res) = experiment::train_and_evaluate(&cfg, stubs, set, test, config_fingerprint, &out.join(name))?;
        let vat = res
            .report
            .get(Pipeline::VatTranslated)
            .ok_or_else(|| VatError::Precondition("missing translated pipeline".into()))?;
        baselines.get_or_insert((
            res.report.accuracy(Pipeline::DegradedDirect).unwrap_or(f64::NAN),
            res.report.accuracy(Pipeline::RestoredDirect).unwrap_or(f64::NAN),
        ));
        table_rows.push(AblationRow {
            name: name.to_string(),
            flags: *flags,
            accuracy: vat.accuracy,
            auc: vat.auc,
            train_seconds: res.train_seconds,
        });
    }
    let (d, r) = baselines.unwrap_or((f64::NAN, f64::NAN));
    let table = AblationTable {
        seed: base.seed,
        config_fingerprint: config_fingerprint.to_string(),
        degraded_direct_accuracy: d,
        restored_direct_accuracy: r,
        rows: table_rows,
    };
    write_text(&table.to_csv(), &out.join("ablation.csv"))?;
    write_json(&table, &out.join("ablation.json"))?;
    Ok(table)
}

// ------------------------------------------------------ restoration sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationPoint {
    pub checkpoint: PathBuf,
    /// Validation PSNR recorded with the checkpoint.
    pub restorer_psnr: f64,
    pub restored_direct_accuracy: f64,
    pub vat_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationSweep {
    pub seed: u64,
    pub config_fingerprint: String,
    pub points: Vec<RestorationPoint>,
    /// Rank correlation of restorer PSNR with translated accuracy.
    pub spearman_vat: f64,
    /// Rank correlation of restorer PSNR with restored-direct accuracy.
    pub spearman_restored: f64,
}

/// Validation PSNR stored in a restorer checkpoint's metadata.
pub fn checkpoint_psnr(restorer: &FrozenRestorer) -> Result<f64> {
    restorer
        .meta
        .metrics
        .get("val_psnr")
        .copied()
        .ok_or_else(|| VatError::Precondition("restorer checkpoint lacks val_psnr".into()))
}

/// Checks the sweep precondition: at least three checkpoints whose PSNRs
/// strictly increase in the given order.
pub fn check_increasing_quality(psnrs: &[f64]) -> Result<()> {
    if psnrs.len() < 3 {
        return Err(VatError::Precondition(format!("need >= 3 restoration checkpoints, got {}", psnrs.len())));
    }
    if psnrs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(VatError::Precondition(format!(
            "restoration checkpoints must have strictly increasing PSNR, got {psnrs:?}"
        )));
    }
    Ok(())
}

/// Trains one translator per restorer checkpoint, with everything else
/// fixed, and correlates restoration quality with downstream accuracy.
pub fn sweep_restoration_quality(
    checkpoints: &[PathBuf],
    base: &TrainConfig,
    stubs: &Stubs,
    corpus: &Corpus,
    config_fingerprint: &str,
    out: &Path,
) -> Result<RestorationSweep> {
    let restorers = checkpoints
        .iter()
        .map(|p| FrozenRestorer::load(p, DType::F32))
        .collect::<Result<Vec<_>>>()?;
    let psnrs = restorers.iter().map(checkpoint_psnr).collect::<Result<Vec<_>>>()?;
    check_increasing_quality(&psnrs)?;
    let mut points = Vec::new();
    for (k, ((path, restorer), psnr)) in checkpoints.iter().zip(restorers).zip(&psnrs).enumerate() {
        info!("restoration sweep point {k}: {} ({psnr:.2} dB)", path.display());
        let variant = Stubs {
            classifier: stubs.classifier.clone(),
            restorer,
            bank: stubs.bank.clone(),
        };
        let test = experiment::test_set(&variant, corpus)?;
        let set = experiment::training_set(base, &variant, corpus)?;
        let (_, res) =
            experiment::train_and_evaluate(base, &variant, &set, &test, config_fingerprint, &out.join(format!("point{k}")))?;
        points.push(RestorationPoint {
            checkpoint: path.clone(),
            restorer_psnr: *psnr,
            restored_direct_accuracy: res.report.accuracy(Pipeline::RestoredDirect).unwrap_or(f64::NAN),
            vat_accuracy: res.report.accuracy(Pipeline::VatTranslated).unwrap_or(f64::NAN),
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.restorer_psnr).collect();
    let vat: Vec<f64> = points.iter().map(|p| p.vat_accuracy).collect();
    let restored: Vec<f64> = points.iter().map(|p| p.restored_direct_accuracy).collect();
    // A flat accuracy series has no defined rank correlation; report 0.
    let sweep = RestorationSweep {
        seed: base.seed,
        config_fingerprint: config_fingerprint.to_string(),
        spearman_vat: metrics::spearman(&x, &vat).unwrap_or(0.0),
        spearman_restored: metrics::spearman(&x, &restored).unwrap_or(0.0),
        points,
    };
    let mut csv = String::from("checkpoint,restorer_psnr,restored_direct_accuracy,vat_accuracy\n");
    for p in &sweep.points {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            p.checkpoint.display(),
            p.restorer_psnr,
            p.restored_direct_accuracy,
            p.vat_accuracy
        ));
    }
    write_text(&csv, &out.join("restoration_sweep.csv"))?;
    write_json(&sweep, &out.join("restoration_sweep.json"))?;
    Chart {
        title: format!("Restoration quality vs accuracy (Spearman {:.2})", sweep.spearman_vat),
        x_label: "restorer validation PSNR (dB)".into(),
        y_label: "test accuracy".into(),
        series: vec![
            Series { label: "vat-translated".into(), points: x.iter().copied().zip(vat).collect() },
            Series { label: "restored-direct".into(), points: x.iter().copied().zip(restored).collect() },
        ],
        x_range: None,
        y_range: None,
        diagonal: false,
    }
    .write(&out.join("restoration_sweep.svg"))?;
    Ok(sweep)
}

// ---------------------------------------------------------- size sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub base_dim: usize,
    /// Trainable parameters of the shipped translator (gate and `T_A`).
    pub parameters: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSweep {
    pub seed: u64,
    pub config_fingerprint: String,
    pub config: TrainConfig,
    pub points: Vec<SizePoint>,
}

/// Trains one translator per base dimension.
pub fn sweep_translator_size(
    base_dims: &[usize],
    base: &TrainConfig,
    stubs: &Stubs,
    set: &TrainingSet,
    test: &TestSet,
    config_fingerprint: &str,
    out: &Path,
) -> Result<SizeSweep> {
    if base_dims.is_empty() || base_dims.windows(2).any(|w| w[1] <= w[0]) || base_dims[0] == 0 {
        return Err(VatError::Precondition(format!("base dims must be positive and strictly increasing, got {base_dims:?}")));
    }
    let mut points = Vec::new();
    for &d in base_dims {
        info!("size sweep: base dim {d}");
        let mut cfg = base.clone();
        cfg.arch.translator.base_dim = d;
        let (outcome, res) =
            experiment::train_and_evaluate(&cfg, stubs, set, test, config_fingerprint, &out.join(format!("dim{d}")))?;
        points.push(SizePoint {
            base_dim: d,
            parameters: parameter_count(&outcome.bundle.theta_a, ""),
            accuracy: res.report.accuracy(Pipeline::VatTranslated).unwrap_or(f64::NAN),
        });
    }
    let sweep = SizeSweep {
        seed: base.seed,
        config_fingerprint: config_fingerprint.to_string(),
        config: base.clone(),
        points,
    };
    let mut csv = String::from("base_dim,parameters,accuracy\n");
    for p in &sweep.points {
        csv.push_str(&format!("{},{},{}\n", p.base_dim, p.parameters, p.accuracy));
    }
    write_text(&csv, &out.join("size_sweep.csv"))?;
    write_json(&sweep, &out.join("size_sweep.json"))?;
    Chart {
        title: "Translator size vs accuracy".into(),
        x_label: "trainable parameters".into(),
        y_label: "test accuracy".into(),
        series: vec![Series {
            label: "vat-translated".into(),
            points: sweep.points.iter().map(|p| (p.parameters as f64, p.accuracy)).collect(),
        }],
        x_range: None,
        y_range: None,
        diagonal: false,
    }
    .write(&out.join("size_sweep.svg"))?;
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_in_canonical_order() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 6);
        assert!(!rows[0].1.cycle && rows[0].1.mle);
        assert!(rows[1].1.cycle && !rows[1].1.mle);
        assert_eq!(rows[5].1, AblationFlags::FULL);
        let names: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let mut dedup = names.clone();
        dedup.dedup();
        assert_eq!(names, dedup);
    }

    #[test]
    fn flags_switch_components_off() {
        let base = TrainConfig::default();
        let cfg = ablation_rows()[1].1.apply(&base);
        assert_eq!(cfg.weights.mle, 0.0);
        assert_eq!(cfg.weights.cyc, base.weights.cyc);
        assert!(!cfg.arch.gate_enabled);
        assert_eq!(cfg.mixup, MixupMode::Off);
        assert_eq!(AblationFlags::FULL.apply(&base), base);
    }

    #[test]
    fn quality_precondition() {
        assert!(check_increasing_quality(&[10.0, 12.0, 15.0]).is_ok());
        assert!(check_increasing_quality(&[10.0, 12.0]).is_err());
        assert!(check_increasing_quality(&[10.0, 10.0, 15.0]).is_err());
        assert!(check_increasing_quality(&[14.0, 12.0, 15.0]).is_err());
    }

    #[test]
    fn best_row_prefers_earliest_on_ties() {
        let mk = |name: &str, acc| AblationRow {
            name: name.into(),
            flags: AblationFlags::FULL,
            accuracy: acc,
            auc: 0.5,
            train_seconds: 0.0,
        };
        let t = AblationTable {
            seed: 0,
            config_fingerprint: String::new(),
            degraded_direct_accuracy: 0.0,
            restored_direct_accuracy: 0.0,
            rows: vec![mk("a", 0.3), mk("b", 0.5), mk("c", 0.5)],
        };
        assert_eq!(t.best().unwrap().name, "b");
        assert!(t.to_csv().lines().nth(2).unwrap().starts_with("b,true,true,true,uncertainty,0.5"));
    }
}
