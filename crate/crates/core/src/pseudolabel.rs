//! Pseudo-labels for degraded images: merge predictions on the degraded and
//! restored views, attach uncertainty, threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VatError};
use crate::nets::prediction::{BoundingBox, Prediction, PredictionOutput};
use crate::nets::FrozenClassifier;
use crate::image::ImageTensor;
use crate::uncertainty::{ReferenceBank, UncertaintyScore};

pub const DEFAULT_EPSILON: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "LQ")]
    Degraded,
    #[serde(rename = "R")]
    Restored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub weight: f64,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>, weight: f64) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(VatError::InvalidDistribution(format!("soft label sums to {sum}")));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(VatError::InvalidParameter(format!("label weight {weight} outside [0, 1]")));
        }
        Ok(Self { probs, weight })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelPayload {
    Soft(SoftLabel),
    Boxes(Vec<BoundingBox>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: LabelPayload,
    pub u: f64,
    pub source: Source,
    pub kept: bool,
}

/// Merged prediction and the view it came from. For detection the source
/// is the view contributing the highest-confidence surviving box.
#[derive(Debug, Clone, PartialEq)]
pub struct Merged {
    pub prediction: Prediction,
    pub source: Source,
}

/// Greedy non-maximum suppression: visit boxes by descending confidence,
/// dropping any box overlapping an already kept box of the same class with
/// IoU above `iou_threshold`. Stable for equal confidences.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].confidence.total_cmp(&boxes[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept.iter().all(|k| k.class != b.class || k.iou(b) <= iou_threshold) {
            kept.push(b.clone());
        }
    }
    kept
}

/// Combines the predictions on the degraded and restored views by maximum
/// confidence. Classification ties go to the restored view.
pub fn merge_max_confidence(pred_lq: &Prediction, pred_r: &Prediction, iou_threshold: f64) -> Result<Merged> {
    if pred_lq.kind() != pred_r.kind() {
        return Err(VatError::KindMismatch(format!("{:?} vs {:?}", pred_lq.kind(), pred_r.kind())));
    }
    match (&pred_lq.output, &pred_r.output) {
        (PredictionOutput::Classification(_), PredictionOutput::Classification(_)) => {
            if pred_lq.max_confidence() > pred_r.max_confidence() {
                Ok(Merged {
                    prediction: pred_lq.clone(),
                    source: Source::Degraded,
                })
            } else {
                Ok(Merged {
                    prediction: pred_r.clone(),
                    source: Source::Restored,
                })
            }
        }
        (PredictionOutput::Detection(a), PredictionOutput::Detection(b)) => {
            let all: Vec<BoundingBox> = a.iter().chain(b).cloned().collect();
            let kept = nms(&all, iou_threshold);
            let source = if pred_lq.max_confidence() > pred_r.max_confidence() {
                Source::Degraded
            } else {
                Source::Restored
            };
            let embedding = match source {
                Source::Degraded => pred_lq.embedding.clone(),
                Source::Restored => pred_r.embedding.clone(),
            };
            Ok(Merged {
                prediction: Prediction::detection(kept, embedding),
                source,
            })
        }
        _ => unreachable!("kinds checked above"),
    }
}

/// Sets `kept = u < epsilon` on every label.
pub fn filter_by_uncertainty(labels: &[PseudoLabel], epsilon: f64) -> Result<Vec<PseudoLabel>> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(VatError::InvalidParameter(format!("epsilon {epsilon} outside (0, 1]")));
    }
    Ok(labels
        .iter()
        .map(|l| PseudoLabel {
            kept: l.u < epsilon,
            ..l.clone()
        })
        .collect())
}

/// Pseudo-label for one merged prediction, before filtering.
pub fn pseudo_label(merged: &Merged, score: &UncertaintyScore) -> Result<PseudoLabel> {
    let label = match &merged.prediction.output {
        PredictionOutput::Classification(p) => LabelPayload::Soft(SoftLabel::new(p.clone(), 1.0 - score.u)?),
        PredictionOutput::Detection(b) => LabelPayload::Boxes(b.clone()),
    };
    Ok(PseudoLabel {
        label,
        u: score.u,
        source: merged.source,
        kept: false,
    })
}

/// Rows that contribute to the pseudo-label loss term: kept labels, and for
/// box payloads only those containing at least one object.
pub fn loss_mask(labels: &[PseudoLabel]) -> Vec<bool> {
    labels
        .iter()
        .map(|l| {
            l.kept
                && match &l.label {
                    LabelPayload::Soft(_) => true,
                    LabelPayload::Boxes(b) => !b.is_empty(),
                }
        })
        .collect()
}

/// Pseudo-labels for a batch of degraded images and their restorations.
pub fn label_degraded(
    classifier: &FrozenClassifier,
    bank: &ReferenceBank,
    degraded: &[ImageTensor],
    restored: &[ImageTensor],
    epsilon: f64,
) -> Result<Vec<PseudoLabel>> {
    let p_lq = classifier.predict(degraded)?;
    let p_r = classifier.predict(restored)?;
    let labels = p_lq
        .iter()
        .zip(&p_r)
        .map(|(a, b)| {
            let merged = merge_max_confidence(a, b, DEFAULT_NMS_IOU)?;
            let score = bank.estimate(&merged.prediction.embedding)?;
            pseudo_label(&merged, &score)
        })
        .collect::<Result<Vec<_>>>()?;
    filter_by_uncertainty(&labels, epsilon)
}

/// `Y_HQ`: the task model's soft predictions on clean images, weighted by
/// certainty.
pub fn clean_labels(
    classifier: &FrozenClassifier,
    bank: &ReferenceBank,
    images: &[ImageTensor],
) -> Result<Vec<(SoftLabel, UncertaintyScore)>> {
    classifier
        .predict(images)?
        .into_iter()
        .map(|p| {
            let score = bank.estimate(&p.embedding)?;
            let probs = p.probs().map(<[f64]>::to_vec).unwrap_or_default();
            Ok((SoftLabel::new(probs, 1.0 - score.u)?, score))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDumpLine<'a> {
    pub epoch: usize,
    pub id: &'a str,
    pub source: Source,
    pub u: f64,
    pub kept: bool,
}

/// Appends one JSON line per label to `path`.
pub fn dump_jsonl(path: &Path, epoch: usize, ids: &[String], labels: &[PseudoLabel]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| VatError::io(format!("opening {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for (id, l) in ids.iter().zip(labels) {
        let line = PseudoDumpLine {
            epoch,
            id,
            source: l.source,
            u: l.u,
            kept: l.kept,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| VatError::io("writing pseudo-label dump", e))?;
    }
    w.flush().map_err(|e| VatError::io("writing pseudo-label dump", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cls(p: Vec<f64>) -> Prediction {
        Prediction::classification(p, vec![]).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64, class: usize) -> BoundingBox {
        BoundingBox {
            x1,
            y1,
            x2,
            y2,
            confidence,
            class,
        }
    }

    fn label(u: f64) -> PseudoLabel {
        PseudoLabel {
            label: LabelPayload::Soft(SoftLabel::new(vec![1.0], 1.0 - u).unwrap()),
            u,
            source: Source::Restored,
            kept: false,
        }
    }

    #[test]
    fn classification_merge_picks_max() {
        let m = merge_max_confidence(&cls(vec![0.9, 0.1]), &cls(vec![0.3, 0.7]), 0.5).unwrap();
        assert_eq!(m.source, Source::Degraded);
        assert_eq!(m.prediction.probs().unwrap(), &[0.9, 0.1]);
        let tie = merge_max_confidence(&cls(vec![0.6, 0.4]), &cls(vec![0.4, 0.6]), 0.5).unwrap();
        assert_eq!(tie.source, Source::Restored);
    }

    #[test]
    fn kind_mismatch() {
        let d = Prediction::detection(vec![], vec![]);
        assert!(matches!(
            merge_max_confidence(&cls(vec![1.0]), &d, 0.5),
            Err(VatError::KindMismatch(_))
        ));
    }

    #[test]
    fn overlapping_boxes_suppressed() {
        // IoU of these two is 0.8.
        let a = bx(0.0, 0.0, 10.0, 10.0, 0.9, 0);
        let b = bx(0.0, 0.0, 10.0, 8.0, 0.7, 0);
        assert!((a.iou(&b) - 0.8).abs() < 1e-12);
        let m = merge_max_confidence(
            &Prediction::detection(vec![a.clone()], vec![]),
            &Prediction::detection(vec![b], vec![]),
            0.5,
        )
        .unwrap();
        assert_eq!(m.prediction.output, PredictionOutput::Detection(vec![a]));
    }

    #[test]
    fn filter_boundaries() {
        let out = filter_by_uncertainty(&[label(0.2), label(0.3)], 0.3).unwrap();
        assert!(out[0].kept);
        assert!(!out[1].kept);
        assert!(filter_by_uncertainty(&[], 0.0).is_err());
        assert!(filter_by_uncertainty(&[], 1.5).is_err());
    }

    #[test]
    fn loss_mask_skips_dropped_and_empty_box_labels() {
        let boxes = |b: Vec<BoundingBox>, kept| PseudoLabel {
            label: LabelPayload::Boxes(b),
            u: 0.1,
            source: Source::Degraded,
            kept,
        };
        let mut soft = label(0.1);
        soft.kept = true;
        let one = bx(0.0, 0.0, 4.0, 4.0, 0.9, 1);
        let labels = [soft, label(0.9), boxes(vec![], true), boxes(vec![one.clone()], true), boxes(vec![one], false)];
        assert_eq!(loss_mask(&labels), vec![true, false, false, true, false]);
    }

    #[test]
    fn soft_label_validation() {
        assert!(SoftLabel::new(vec![0.5, 0.6], 1.0).is_err());
        assert!(SoftLabel::new(vec![0.5, 0.5], 1.5).is_err());
    }

    #[test]
    fn dump_writes_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pseudo.jsonl");
        dump_jsonl(&p, 0, &["a".into(), "b".into()], &[label(0.1), label(0.9)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"source\":\"R\""));
    }

    /// Reference NMS written independently: repeatedly take the best
    /// remaining box and delete everything it suppresses.
    fn brute_force_nms(boxes: &[BoundingBox], thr: f64) -> Vec<BoundingBox> {
        let mut remaining: Vec<(usize, BoundingBox)> = boxes.iter().cloned().enumerate().collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (bi, b) = &remaining[best];
                let (ci, c) = &remaining[i];
                if c.confidence > b.confidence || (c.confidence == b.confidence && ci < bi) {
                    best = i;
                }
            }
            let (_, top) = remaining.remove(best);
            remaining.retain(|(_, b)| !(b.class == top.class && top.iou(b) > thr));
            out.push(top);
        }
        out
    }

    #[test]
    fn suppression_chain() {
        // a suppresses b; b would suppress c, but b is gone so c survives.
        let a = bx(0.0, 0.0, 10.0, 10.0, 0.9, 0);
        let b = bx(3.0, 0.0, 13.0, 10.0, 0.8, 0);
        let c = bx(7.0, 0.0, 17.0, 10.0, 0.7, 0);
        let input = [c.clone(), a.clone(), b];
        let out = nms(&input, 0.5);
        assert_eq!(out, vec![a, c]);
        assert_eq!(out, brute_force_nms(&input, 0.5));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u8..16, 0u8..16, 1u8..10, 1u8..10, 0u8..5, 0usize..2).prop_map(|(x, y, w, h, c, k)| {
            bx(x as f64, y as f64, (x + w) as f64, (y + h) as f64, c as f64 / 4.0, k)
        })
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force(boxes in proptest::collection::vec(arb_box(), 0..=10), thr in 0.1f64..0.9) {
            prop_assert_eq!(nms(&boxes, thr), brute_force_nms(&boxes, thr));
        }

        #[test]
        fn merged_confidences_are_inputs(a in proptest::collection::vec(arb_box(), 0..5), b in proptest::collection::vec(arb_box(), 0..5)) {
            let m = merge_max_confidence(&Prediction::detection(a.clone(), vec![]), &Prediction::detection(b.clone(), vec![]), 0.5).unwrap();
            let PredictionOutput::Detection(out) = m.prediction.output else { unreachable!() };
            for o in out {
                prop_assert!(a.iter().chain(&b).any(|x| *x == o));
            }
        }

        #[test]
        fn classification_merge_never_loses_confidence(p in 0.0f64..1.0, q in 0.0f64..1.0) {
            let a = cls(vec![p, 1.0 - p]);
            let b = cls(vec![q, 1.0 - q]);
            let m = merge_max_confidence(&a, &b, 0.5).unwrap();
            prop_assert!(m.prediction.max_confidence() >= a.max_confidence().max(b.max_confidence()));
        }

        #[test]
        fn filter_idempotent_and_monotone(us in proptest::collection::vec(0.0f64..1.0, 0..20), e1 in 0.01f64..1.0, e2 in 0.01f64..1.0) {
            let labels: Vec<PseudoLabel> = us.iter().map(|&u| label(u)).collect();
            let once = filter_by_uncertainty(&labels, e1).unwrap();
            prop_assert_eq!(filter_by_uncertainty(&once, e1).unwrap(), once.clone());
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let a = filter_by_uncertainty(&labels, lo).unwrap();
            let b = filter_by_uncertainty(&labels, hi).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!x.kept || y.kept);
            }
        }
    }
}
