//! Split generation, manifests and loading.
//!
//! Layout: `<root>/<split>/<class>/<id>.png` plus `<root>/<split>/manifest.jsonl`.
//! The first manifest line is a header; every following line is one sample.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{render_source, CLASS_COUNT};
use super::degrade::{DegradationParams, DepthMode};
use crate::error::{Result, VatError};
use crate::fingerprint;
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    CleanTrain,
    CleanTest,
    DegradedTrain,
    DegradedTest,
    RestorationPretrain,
    RestorationVal,
}

impl SplitName {
    pub const ALL: [SplitName; 6] = [
        SplitName::CleanTrain,
        SplitName::CleanTest,
        SplitName::DegradedTrain,
        SplitName::DegradedTest,
        SplitName::RestorationPretrain,
        SplitName::RestorationVal,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitName::CleanTrain => "clean_train",
            SplitName::CleanTest => "clean_test",
            SplitName::DegradedTrain => "degraded_train",
            SplitName::DegradedTest => "degraded_test",
            SplitName::RestorationPretrain => "restoration_pretrain",
            SplitName::RestorationVal => "restoration_val",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Degradation ranges. Restoration pretraining and the VaT training stream
/// draw from disjoint parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationConfig {
    Lowlight {
        /// Half-open `[lo, hi)`.
        pretrain_gamma: [f64; 2],
        /// Closed `[lo, hi]`.
        train_gamma: [f64; 2],
    },
    Haze {
        /// One half-open range per haze scale; every source image is rendered
        /// once per scale.
        pretrain_beta: Vec<[f64; 2]>,
        train_beta: Vec<[f64; 2]>,
        airlight: [f64; 2],
        depth: DepthMode,
    },
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig::Lowlight {
            pretrain_gamma: [1.5, 3.0],
            train_gamma: [3.0, 5.0],
        }
    }
}

impl DegradationConfig {
    fn validate(&self) -> Result<()> {
        let check = |r: &[f64; 2], what: &str| -> Result<()> {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(VatError::Config(format!("{what} range {r:?} is not ordered")));
            }
            Ok(())
        };
        match self {
            DegradationConfig::Lowlight {
                pretrain_gamma,
                train_gamma,
            } => {
                check(pretrain_gamma, "pretrain_gamma")?;
                check(train_gamma, "train_gamma")?;
                if pretrain_gamma[0] <= 0.0 || train_gamma[0] <= 0.0 {
                    return Err(VatError::Config("gamma ranges must be positive".into()));
                }
                // [a, b) and [c, d] intersect iff c < b and a <= d.
                if train_gamma[0] < pretrain_gamma[1] && pretrain_gamma[0] <= train_gamma[1] {
                    return Err(VatError::Config(format!(
                        "pretrain gamma {pretrain_gamma:?} overlaps train gamma {train_gamma:?}"
                    )));
                }
            }
            DegradationConfig::Haze {
                pretrain_beta,
                train_beta,
                airlight,
                ..
            } => {
                if pretrain_beta.is_empty() || train_beta.is_empty() {
                    return Err(VatError::Config("haze needs at least one beta range".into()));
                }
                for r in pretrain_beta.iter().chain(train_beta) {
                    check(r, "beta")?;
                    if r[0] < 0.0 {
                        return Err(VatError::Config("beta must be >= 0".into()));
                    }
                }
                check(airlight, "airlight")?;
                if airlight[0] < 0.0 || airlight[1] > 1.0 {
                    return Err(VatError::Config("airlight must lie in [0, 1]".into()));
                }
                for p in pretrain_beta {
                    for t in train_beta {
                        if t[0] < p[1] && p[0] <= t[1] {
                            return Err(VatError::Config(format!(
                                "pretrain beta {p:?} overlaps train beta {t:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn scales(&self, pretrain: bool) -> usize {
        match self {
            DegradationConfig::Lowlight { .. } => 1,
            DegradationConfig::Haze {
                pretrain_beta,
                train_beta,
                ..
            } => {
                if pretrain {
                    pretrain_beta.len()
                } else {
                    train_beta.len()
                }
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, pretrain: bool, scale: usize) -> DegradationParams {
        match self {
            DegradationConfig::Lowlight {
                pretrain_gamma,
                train_gamma,
            } => {
                let gamma = if pretrain {
                    rng.gen_range(pretrain_gamma[0]..pretrain_gamma[1])
                } else {
                    rng.gen_range(train_gamma[0]..=train_gamma[1])
                };
                DegradationParams::Lowlight { gamma }
            }
            DegradationConfig::Haze {
                pretrain_beta,
                train_beta,
                airlight,
                depth,
            } => {
                let beta = if pretrain {
                    let r = pretrain_beta[scale];
                    rng.gen_range(r[0]..r[1])
                } else {
                    let r = train_beta[scale];
                    rng.gen_range(r[0]..=r[1])
                };
                DegradationParams::Haze {
                    beta,
                    airlight: rng.gen_range(airlight[0]..=airlight[1]),
                    depth: *depth,
                }
            }
        }
    }

    /// Whether `params` lies inside the range this config assigns to the split.
    pub fn admits(&self, params: &DegradationParams, pretrain: bool) -> bool {
        match (self, params) {
            (
                DegradationConfig::Lowlight {
                    pretrain_gamma,
                    train_gamma,
                },
                DegradationParams::Lowlight { gamma },
            ) => {
                if pretrain {
                    *gamma >= pretrain_gamma[0] && *gamma < pretrain_gamma[1]
                } else {
                    *gamma >= train_gamma[0] && *gamma <= train_gamma[1]
                }
            }
            (
                DegradationConfig::Haze {
                    pretrain_beta,
                    train_beta,
                    airlight,
                    ..
                },
                DegradationParams::Haze { beta, airlight: a, .. },
            ) => {
                let ranges = if pretrain { pretrain_beta } else { train_beta };
                let beta_ok = ranges.iter().any(|r| {
                    *beta >= r[0] && if pretrain { *beta < r[1] } else { *beta <= r[1] }
                });
                beta_ok && *a >= airlight[0] && *a <= airlight[1]
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub image_size: usize,
    pub clean_train: usize,
    pub degraded_train: usize,
    pub restoration_pretrain: usize,
    pub restoration_val: usize,
    /// Source images in the test set; rendered both clean and degraded.
    pub test: usize,
    pub degradation: DegradationConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            clean_train: 3000,
            degraded_train: 3000,
            restoration_pretrain: 2000,
            restoration_val: 300,
            test: 1000,
            degradation: DegradationConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(VatError::Config("image_size must be >= 8".into()));
        }
        for (n, what) in [
            (self.clean_train, "clean_train"),
            (self.degraded_train, "degraded_train"),
            (self.restoration_pretrain, "restoration_pretrain"),
            (self.restoration_val, "restoration_val"),
            (self.test, "test"),
        ] {
            if n == 0 {
                return Err(VatError::Empty(format!("split {what} has size 0")));
            }
        }
        self.degradation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub split: SplitName,
    pub seed: u64,
    pub count: usize,
    pub class_count: usize,
    pub config: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source_id: u64,
    /// Relative to the dataset root.
    pub path: String,
    pub label: usize,
    pub degradation: Option<DegradationParams>,
    /// Paired clean image, relative to the root, when the split is paired.
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Sample(SampleRecord),
}

pub fn manifest_path(root: &Path, split: SplitName) -> PathBuf {
    root.join(split.dir_name()).join("manifest.jsonl")
}

pub fn split_fingerprint(root: &Path, split: SplitName) -> Result<String> {
    fingerprint::of_file(&manifest_path(root, split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltDatasets {
    pub root: PathBuf,
    pub counts: BTreeMap<SplitName, usize>,
    pub fingerprints: BTreeMap<SplitName, String>,
}

struct SplitPlan {
    name: SplitName,
    sources: std::ops::Range<u64>,
    /// `None` for clean splits, otherwise whether to use the pretrain range.
    degrade: Option<bool>,
    paired: bool,
}

fn balanced_labels(seed: u64, split: SplitName, n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % CLASS_COUNT).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (split.tag() << 56));
    labels.shuffle(&mut rng);
    labels
}

fn write_png(root: &Path, rel: &str, img: &ImageTensor) -> Result<()> {
    let full = root.join(rel);
    if let Some(parent) = full.parent() {
        fs::create_dir_all(parent).map_err(|e| VatError::io(format!("creating {}", parent.display()), e))?;
    }
    img.save_png(&full)
}

/// Generates all splits under `root` and writes their manifests.
///
/// Source-image ranges are disjoint across train splits, so the clean and
/// degraded training streams are unpaired. The test split renders each
/// source once clean and once degraded.
pub fn build_datasets(config: &DataConfig, root: &Path) -> Result<BuiltDatasets> {
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| VatError::io(format!("creating {}", root.display()), e))?;

    let mut next = 0u64;
    let mut take = |n: usize| {
        let r = next..next + n as u64;
        next += n as u64;
        r
    };
    let clean_train = take(config.clean_train);
    let degraded_train = take(config.degraded_train);
    let pretrain = take(config.restoration_pretrain);
    let val = take(config.restoration_val);
    let test = take(config.test);
    let plans = [
        SplitPlan { name: SplitName::CleanTrain, sources: clean_train, degrade: None, paired: false },
        SplitPlan { name: SplitName::DegradedTrain, sources: degraded_train, degrade: Some(false), paired: false },
        SplitPlan { name: SplitName::RestorationPretrain, sources: pretrain, degrade: Some(true), paired: true },
        SplitPlan { name: SplitName::RestorationVal, sources: val, degrade: Some(true), paired: true },
        SplitPlan { name: SplitName::CleanTest, sources: test.clone(), degrade: None, paired: false },
        SplitPlan { name: SplitName::DegradedTest, sources: test, degrade: Some(false), paired: true },
    ];

    let mut counts = BTreeMap::new();
    let mut fingerprints = BTreeMap::new();
    for plan in plans {
        let labels = balanced_labels(config.seed, plan.name, plan.sources.clone().count());
        // Test pairs share labels: the degraded test split reuses the clean test labelling.
        let labels = if plan.name == SplitName::DegradedTest {
            balanced_labels(config.seed, SplitName::CleanTest, labels.len())
        } else {
            labels
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(plan.name.tag() * 0x1000_0000_0001));
        let mut records = Vec::new();
        let split_dir = plan.name.dir_name();
        for (source_id, &label) in plan.sources.clone().zip(&labels) {
            let clean = render_source(config.seed, source_id, label, config.image_size)?;
            match plan.degrade {
                None => {
                    let id = format!("{source_id:06}");
                    let path = format!("{split_dir}/{label}/{id}.png");
                    write_png(root, &path, &clean)?;
                    records.push(SampleRecord { id, source_id, path, label, degradation: None, target: None });
                }
                Some(pretrain) => {
                    let scales = config.degradation.scales(pretrain);
                    for scale in 0..scales {
                        let params = config.degradation.sample(&mut rng, pretrain, scale);
                        let degraded = params.apply(&clean)?;
                        let id = if scales == 1 {
                            format!("{source_id:06}")
                        } else {
                            format!("{source_id:06}_s{scale}")
                        };
                        let path = format!("{split_dir}/{label}/{id}.png");
                        write_png(root, &path, &degraded)?;
                        let target = if !plan.paired {
                            None
                        } else if plan.name == SplitName::DegradedTest {
                            Some(format!("{}/{label}/{source_id:06}.png", SplitName::CleanTest.dir_name()))
                        } else {
                            let t = format!("{split_dir}/{label}/{id}.clean.png");
                            write_png(root, &t, &clean)?;
                            Some(t)
                        };
                        records.push(SampleRecord {
                            id,
                            source_id,
                            path,
                            label,
                            degradation: Some(params),
                            target,
                        });
                    }
                }
            }
        }
        if records.is_empty() {
            return Err(VatError::Empty(format!("split {} is empty", plan.name)));
        }
        let header = ManifestHeader {
            split: plan.name,
            seed: config.seed,
            count: records.len(),
            class_count: CLASS_COUNT,
            config: config.clone(),
        };
        let mpath = manifest_path(root, plan.name);
        fs::create_dir_all(mpath.parent().expect("manifest has a parent"))
            .map_err(|e| VatError::io("creating split dir", e))?;
        let mut out = Vec::new();
        writeln!(out, "{}", serde_json::to_string(&ManifestLine::Header(header))?).expect("vec write");
        for r in &records {
            writeln!(out, "{}", serde_json::to_string(&ManifestLine::Sample(r.clone()))?).expect("vec write");
        }
        fs::write(&mpath, &out).map_err(|e| VatError::io(format!("writing {}", mpath.display()), e))?;
        counts.insert(plan.name, records.len());
        fingerprints.insert(plan.name, fingerprint::of_bytes(&out));
    }
    Ok(BuiltDatasets {
        root: root.to_path_buf(),
        counts,
        fingerprints,
    })
}

/// One loaded split with its images decoded to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    pub images: Vec<ImageTensor>,
    /// Paired clean images, present for paired splits.
    pub targets: Option<Vec<ImageTensor>>,
    pub fingerprint: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn split(&self) -> SplitName {
        self.header.split
    }

    /// First `n` samples (all if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            header: self.header.clone(),
            records: self.records[..n].to_vec(),
            images: self.images[..n].to_vec(),
            targets: self.targets.as_ref().map(|t| t[..n].to_vec()),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

/// Loads a split, validating its manifest against the files on disk.
pub fn load_split(root: &Path, split: SplitName) -> Result<Dataset> {
    let mpath = manifest_path(root, split);
    if !mpath.exists() {
        return Err(VatError::DatasetMissing(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| VatError::io(format!("reading {}", mpath.display()), e))?;
    let mut lines = text.lines();
    let header = match lines.next().map(serde_json::from_str::<ManifestLine>).transpose()? {
        Some(ManifestLine::Header(h)) => h,
        _ => return Err(VatError::Config(format!("{} lacks a header line", mpath.display()))),
    };
    let pretrain = matches!(split, SplitName::RestorationPretrain | SplitName::RestorationVal);
    let mut records = Vec::with_capacity(header.count);
    let mut images = Vec::with_capacity(header.count);
    let mut targets = Vec::new();
    for line in lines {
        let record = match serde_json::from_str::<ManifestLine>(line)? {
            ManifestLine::Sample(r) => r,
            ManifestLine::Header(_) => {
                return Err(VatError::Config(format!("{} has a second header", mpath.display())))
            }
        };
        if record.label >= header.class_count {
            return Err(VatError::Config(format!("label {} out of range in {}", record.label, record.id)));
        }
        if let Some(params) = &record.degradation {
            if !header.config.degradation.admits(params, pretrain) {
                return Err(VatError::Config(format!(
                    "degradation {params:?} of {} outside the configured range",
                    record.id
                )));
            }
        }
        let path = root.join(&record.path);
        if !path.exists() {
            return Err(VatError::DatasetMissing(path));
        }
        images.push(ImageTensor::load_png(&path)?);
        if let Some(t) = &record.target {
            let tpath = root.join(t);
            if !tpath.exists() {
                return Err(VatError::DatasetMissing(tpath));
            }
            targets.push(ImageTensor::load_png(&tpath)?);
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(VatError::Empty(format!("split {split} is empty")));
    }
    if records.len() != header.count {
        return Err(VatError::Config(format!(
            "{} declares {} samples but lists {}",
            mpath.display(),
            header.count,
            records.len()
        )));
    }
    let targets = if targets.is_empty() {
        None
    } else if targets.len() == records.len() {
        Some(targets)
    } else {
        return Err(VatError::Config(format!("{} pairs only some samples", mpath.display())));
    };
    Ok(Dataset {
        header,
        records,
        images,
        targets,
        fingerprint: fingerprint::of_bytes(text.as_bytes()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> DataConfig {
        DataConfig {
            seed,
            image_size: 16,
            clean_train: 40,
            degraded_train: 30,
            restoration_pretrain: 20,
            restoration_val: 10,
            test: 20,
            degradation: DegradationConfig::default(),
        }
    }

    #[test]
    fn equal_seeds_give_identical_manifests() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ba = build_datasets(&tiny_config(4), a.path()).unwrap();
        let bb = build_datasets(&tiny_config(4), b.path()).unwrap();
        assert_eq!(ba.fingerprints, bb.fingerprints);
        for split in SplitName::ALL {
            let ma = fs::read(manifest_path(a.path(), split)).unwrap();
            let mb = fs::read(manifest_path(b.path(), split)).unwrap();
            assert_eq!(ma, mb, "{split}");
        }
    }

    #[test]
    fn train_streams_are_unpaired_and_ranges_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        build_datasets(&tiny_config(1), dir.path()).unwrap();
        let clean = load_split(dir.path(), SplitName::CleanTrain).unwrap();
        let degraded = load_split(dir.path(), SplitName::DegradedTrain).unwrap();
        let pre = load_split(dir.path(), SplitName::RestorationPretrain).unwrap();
        let clean_ids: std::collections::HashSet<_> = clean.records.iter().map(|r| r.source_id).collect();
        assert!(degraded.records.iter().all(|r| !clean_ids.contains(&r.source_id)));
        let gammas = |d: &Dataset| -> Vec<f64> {
            d.records
                .iter()
                .map(|r| match r.degradation {
                    Some(DegradationParams::Lowlight { gamma }) => gamma,
                    _ => panic!("expected lowlight"),
                })
                .collect()
        };
        assert!(gammas(&pre).iter().all(|g| (1.5..3.0).contains(g)));
        assert!(gammas(&degraded).iter().all(|g| (3.0..=5.0).contains(g)));
        assert!(pre.targets.is_some());
        assert!(degraded.targets.is_none());
    }

    #[test]
    fn class_histogram_is_balanced() {
        let dir = tempfile::tempdir().unwrap();
        build_datasets(&tiny_config(2), dir.path()).unwrap();
        let clean = load_split(dir.path(), SplitName::CleanTrain).unwrap();
        let mut hist = [0usize; CLASS_COUNT];
        for l in clean.labels() {
            hist[l] += 1;
        }
        let mean = clean.len() as f64 / CLASS_COUNT as f64;
        assert!(hist.iter().all(|&c| (c as f64 - mean).abs() <= 0.1 * mean), "{hist:?}");
    }

    #[test]
    fn degraded_test_pairs_with_clean_test() {
        let dir = tempfile::tempdir().unwrap();
        build_datasets(&tiny_config(3), dir.path()).unwrap();
        let clean = load_split(dir.path(), SplitName::CleanTest).unwrap();
        let degraded = load_split(dir.path(), SplitName::DegradedTest).unwrap();
        assert_eq!(clean.labels(), degraded.labels());
        assert_eq!(degraded.targets.as_ref().unwrap(), &clean.images);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let mut cfg = tiny_config(0);
        cfg.degradation = DegradationConfig::Lowlight {
            pretrain_gamma: [1.5, 3.5],
            train_gamma: [3.0, 5.0],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_datasets(&cfg, dir.path()), Err(VatError::Config(_))));
    }

    #[test]
    fn empty_split_rejected() {
        let mut cfg = tiny_config(0);
        cfg.degraded_train = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_datasets(&cfg, dir.path()), Err(VatError::Empty(_))));
    }

    #[test]
    fn missing_corpus_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_split(dir.path(), SplitName::CleanTrain),
            Err(VatError::DatasetMissing(_))
        ));
    }

    #[test]
    fn haze_renders_one_sample_per_scale() {
        let mut cfg = tiny_config(5);
        cfg.degradation = DegradationConfig::Haze {
            pretrain_beta: vec![[0.2, 0.6], [0.6, 1.0]],
            train_beta: vec![[1.0, 1.5], [1.5, 2.5]],
            airlight: [0.7, 0.9],
            depth: DepthMode::Radial,
        };
        let dir = tempfile::tempdir().unwrap();
        let built = build_datasets(&cfg, dir.path()).unwrap();
        assert_eq!(built.counts[&SplitName::DegradedTrain], 60);
        let d = load_split(dir.path(), SplitName::RestorationPretrain).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.targets.unwrap().len(), 40);
    }
}
