//! Nonparametric uncertainty of task-model predictions.
//!
//! A reference bank of clean-image embeddings supports a Gaussian-kernel
//! Nadaraya–Watson class posterior and a kernel density estimate. The score is
//! `u = 1 − confidence · gate`, where the gate compares the query density with
//! a low quantile of the bank's own leave-one-out densities, so queries far
//! from the bank get `u → 1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};
use crate::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyConfig {
    /// Quantile of the leave-one-out bank densities at which the density
    /// gate saturates.
    pub density_quantile: f64,
    /// Multiplies the Scott's-rule bandwidth.
    pub bandwidth_scale: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            density_quantile: 0.05,
            bandwidth_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub u: f64,
    pub nw_confidence: f64,
    /// Log of the mean kernel value over the bank (kernel normalization
    /// constants omitted).
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    embeddings: Vec<f32>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    bandwidth: f64,
    /// Log-density threshold of the gate.
    log_density_threshold: f64,
    config: UncertaintyConfig,
}

fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Scott's rule `N^(−1/(d+4)) · σ̄`, with `σ̄` the mean per-dimension
/// standard deviation.
pub fn scott_bandwidth(embeddings: &[f32], n: usize, dim: usize) -> f64 {
    let mut std_sum = 0.0;
    for j in 0..dim {
        let col = (0..n).map(|i| embeddings[i * dim + j] as f64);
        let mean = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        std_sum += var.sqrt();
    }
    (n as f64).powf(-1.0 / (dim as f64 + 4.0)) * std_sum / dim as f64
}

/// Lower `q`-quantile with linear interpolation.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl ReferenceBank {
    /// Builds a bank with the Scott's-rule bandwidth.
    pub fn build(embeddings: Vec<Vec<f32>>, labels: Vec<usize>, classes: usize, config: UncertaintyConfig) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(VatError::Empty("reference bank needs at least one embedding".into()));
        }
        let n = embeddings.len();
        let dim = embeddings[0].len();
        let flat: Vec<f32> = embeddings.concat();
        let bandwidth = scott_bandwidth(&flat, n, dim) * config.bandwidth_scale;
        Self::with_bandwidth(flat, labels, dim, classes, bandwidth, config)
    }

    /// Builds a bank from a flat row-major matrix with a given bandwidth.
    pub fn with_bandwidth(
        embeddings: Vec<f32>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        bandwidth: f64,
        config: UncertaintyConfig,
    ) -> Result<Self> {
        if labels.is_empty() || dim == 0 {
            return Err(VatError::Empty("reference bank needs at least one embedding".into()));
        }
        if embeddings.len() != labels.len() * dim {
            return Err(VatError::ShapeMismatch(format!(
                "{} values for {} rows of dim {dim}",
                embeddings.len(),
                labels.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(VatError::InvalidParameter("non-finite embedding".into()));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(VatError::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(VatError::InvalidParameter(format!("label {bad} outside {classes} classes")));
        }
        if !(0.0..=1.0).contains(&config.density_quantile) {
            return Err(VatError::InvalidParameter("density quantile must lie in [0, 1]".into()));
        }
        let mut bank = Self {
            embeddings,
            labels,
            dim,
            classes,
            bandwidth,
            log_density_threshold: f64::NEG_INFINITY,
            config,
        };
        bank.log_density_threshold = bank.self_density_threshold();
        Ok(bank)
    }

    fn self_density_threshold(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return f64::NEG_INFINITY;
        }
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let logk: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| self.log_kernel(self.row(i), j)).collect();
                logsumexp(&logk) - ((n - 1) as f64).ln()
            })
            .collect();
        quantile(&loo, self.config.density_quantile)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn log_density_threshold(&self) -> f64 {
        self.log_density_threshold
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    fn log_kernel(&self, query: &[f32], j: usize) -> f64 {
        let d2: f64 = query
            .iter()
            .zip(self.row(j))
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        -d2 / (2.0 * self.bandwidth * self.bandwidth)
    }

    /// Nadaraya–Watson class posterior and log density of `query`.
    pub fn posterior(&self, query: &[f32]) -> Result<(Vec<f64>, f64)> {
        if query.len() != self.dim {
            return Err(VatError::ShapeMismatch(format!("query dim {} vs bank dim {}", query.len(), self.dim)));
        }
        let logk: Vec<f64> = (0..self.len()).map(|j| self.log_kernel(query, j)).collect();
        let total = logsumexp(&logk);
        let log_density = total - (self.len() as f64).ln();
        let mut post = vec![0.0; self.classes];
        if total == f64::NEG_INFINITY {
            return Ok((post, log_density));
        }
        for (lk, &y) in logk.iter().zip(&self.labels) {
            post[y] += (lk - total).exp();
        }
        Ok((post, log_density))
    }

    /// `u = 1 − max_c p̂(c|x) · min(1, density(x) / threshold)`.
    pub fn estimate(&self, query: &[f32]) -> Result<UncertaintyScore> {
        let (post, log_density) = self.posterior(query)?;
        let nw_confidence = post.iter().copied().fold(0.0, f64::max).clamp(0.0, 1.0);
        let gate = if log_density >= self.log_density_threshold {
            1.0
        } else {
            (log_density - self.log_density_threshold).exp()
        };
        let u = (1.0 - nw_confidence * gate).clamp(0.0, 1.0);
        Ok(UncertaintyScore {
            u,
            nw_confidence,
            log_density,
        })
    }

    pub fn estimate_batch(&self, queries: &[Vec<f32>]) -> Result<Vec<UncertaintyScore>> {
        queries.iter().map(|q| self.estimate(q)).collect()
    }
}

/// Weight of a label given its uncertainty.
pub fn certainty_weight(score: &UncertaintyScore) -> f64 {
    1.0 - score.u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSidecar {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub bandwidth: f64,
    pub quantile: f64,
    pub log_density_threshold: f64,
    pub model_fingerprint: String,
    pub embeddings_sha256: String,
    pub labels: Vec<usize>,
}

pub fn bank_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the embedding matrix as little-endian `f32` rows plus a JSON sidecar.
pub fn save_bank(bank: &ReferenceBank, model_fingerprint: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| VatError::io(format!("creating {}", parent.display()), e))?;
    }
    let bytes: Vec<u8> = bank.embeddings.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, &bytes).map_err(|e| VatError::io(format!("writing {}", path.display()), e))?;
    let sidecar = BankSidecar {
        n: bank.len(),
        d: bank.dim,
        classes: bank.classes,
        bandwidth: bank.bandwidth,
        quantile: bank.config.density_quantile,
        log_density_threshold: bank.log_density_threshold,
        model_fingerprint: model_fingerprint.to_string(),
        embeddings_sha256: fingerprint::of_bytes(&bytes),
        labels: bank.labels.clone(),
    };
    let sp = bank_sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&sidecar)?).map_err(|e| VatError::io(format!("writing {}", sp.display()), e))
}

pub fn load_bank(path: &Path) -> Result<(ReferenceBank, BankSidecar)> {
    let sp = bank_sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| VatError::io(format!("reading {}", sp.display()), e))?;
    let side: BankSidecar = serde_json::from_str(&text)?;
    fingerprint::verify_file(path, &side.embeddings_sha256)?;
    let bytes = fs::read(path).map_err(|e| VatError::io(format!("reading {}", path.display()), e))?;
    let embeddings: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let config = UncertaintyConfig {
        density_quantile: side.quantile,
        bandwidth_scale: 1.0,
    };
    let bank = ReferenceBank::with_bandwidth(embeddings, side.labels.clone(), side.d, side.classes, side.bandwidth, config)?;
    Ok((bank, side))
}
