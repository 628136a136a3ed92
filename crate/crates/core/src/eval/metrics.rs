//! Pure metric functions.

use crate::error::{Result, VatError};
use crate::image::ImageTensor;

pub const PSNR_CAP: f64 = 100.0;

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(VatError::Empty("accuracy of zero predictions".into()));
    }
    if probs.len() != labels.len() {
        return Err(VatError::ShapeMismatch(format!("{} predictions vs {} labels", probs.len(), labels.len())));
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Per-class accuracy; `None` for classes absent from `labels`.
pub fn per_class_accuracy(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (p, &y) in probs.iter().zip(labels) {
        if y < classes {
            tot[y] += 1;
            if argmax(p) == y {
                hit[y] += 1;
            }
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a positive outscores a negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VatError::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(VatError::Precondition("roc_auc needs both positive and negative samples".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC points `(false positive rate, true positive rate)` from the strictest
/// threshold down, starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(VatError::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(VatError::Precondition("roc_curve needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// One-vs-rest AUC per class (`None` when a class is absent) and their mean
/// over the defined classes.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if probs.len() != labels.len() {
        return Err(VatError::ShapeMismatch(format!("{} predictions vs {} labels", probs.len(), labels.len())));
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p.get(c).copied().unwrap_or(0.0)).collect();
        let bin: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        per_class.push(roc_auc(&scores, &bin).ok());
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(VatError::Precondition("no class has both positives and negatives".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per_class, mean))
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(VatError::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian of odd length `n`.
fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let w: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window length used for an `h×w` image: 11, shrunk to the largest odd
/// size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Structural similarity with a Gaussian window (σ = 1.5), unit dynamic
/// range, averaged over valid window positions and channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, c) = a.dims();
    let n = ssim_window(h, w);
    let k = gaussian_kernel(n, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let (mu_a, _, _) = filter_valid(&pa, h, w, &k);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &k);
        let (e_aa, _, _) = filter_valid(&prod(&pa, &pa), h, w, &k);
        let (e_bb, _, _) = filter_valid(&prod(&pb, &pb), h, w, &k);
        let (e_ab, _, _) = filter_valid(&prod(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(VatError::Precondition("spearman needs two equal-length series of length >= 2".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(VatError::Precondition("spearman undefined for a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
