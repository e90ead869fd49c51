//! Inference by nearest-label retrieval, mIoU, and the unseen-label
//! evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::{LabelRecord, LabelSpace};
use crate::seg_head::{predict, SegModel};
use crate::synth::Scene;
use crate::tensor::Tensor;

/// Labels every pixel with the most cosine-similar label.
pub fn infer(model: &SegModel, features: &Tensor, space: &LabelSpace) -> Result<Vec<usize>> {
    let emb = predict(model, features)?;
    retrieve_map(&emb, space)
}

/// Per-pixel retrieval over an H×W×C embedding tensor.
pub fn retrieve_map(embeddings: &Tensor, space: &LabelSpace) -> Result<Vec<usize>> {
    let c = *embeddings.shape().last().ok_or_else(|| Error::shape("infer", "scalar embedding map"))?;
    if c != space.dim() {
        return Err(Error::DimensionMismatch {
            context: "infer".into(),
            expected: space.dim(),
            found: c,
        });
    }
    embeddings.data().chunks(c).map(|px| space.retrieve(px).map(|(id, _)| id)).collect()
}

/// Intersection and union pixel counts per class, accumulated over any
/// number of label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub in_truth: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        IouCounts {
            intersection: vec![0; classes],
            union: vec![0; classes],
            in_truth: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.union.len()
    }

    /// Pixels with ignore truth (`-1`) are skipped for both maps.
    pub fn add(&mut self, pred: &[usize], truth: &[i64]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                context: "miou".into(),
                expected: truth.len(),
                found: pred.len(),
            });
        }
        let n = self.classes();
        for (&p, &t) in pred.iter().zip(truth) {
            if t < 0 {
                continue;
            }
            let t = t as usize;
            if p >= n || t >= n {
                return Err(Error::InvalidArgument(format!("label id {} outside [0, {n})", p.max(t))));
            }
            self.in_truth[t] += 1;
            if p == t {
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.in_truth.iter().all(|&c| c == 0) {
            return Err(Error::UndefinedMetric("ground truth has no valid pixel"));
        }
        Ok(mean_present(&self.per_class()))
    }
}

fn mean_present(ious: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// mIoU of one label map against truth (`-1` = ignore). Classes absent
/// from both maps are left out of the mean; a class predicted but absent
/// from truth counts with IoU 0.
pub fn miou(pred: &[usize], truth: &[i64], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut counts = IouCounts::new(classes);
    counts.add(pred, truth)?;
    Ok((counts.miou()?, counts.per_class()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Dataset-level mIoU: counts are pooled over all scenes first.
pub fn evaluate(model: &SegModel, space: &LabelSpace, scenes: &[Scene]) -> Result<Evaluation> {
    let mut counts = IouCounts::new(space.len());
    for scene in scenes {
        let pred = infer(model, &scene.features, space)?;
        counts.add(&pred, &scene.truth_labels())?;
    }
    Ok(Evaluation {
        miou: counts.miou()?,
        per_class_iou: counts.per_class(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    /// Ids of the added labels in the extended space.
    pub heldout_ids: Vec<usize>,
    pub heldout_names: Vec<String>,
    pub heldout_iou: Vec<Option<f64>>,
    /// Mean over heldout labels that occur in truth or prediction.
    pub heldout_miou: Option<f64>,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Extends `base` with `heldout` records, labels the scenes by retrieval
/// over the extended space and scores them. Scene truth must use the
/// extended ids (base ids first, heldout after).
pub fn zero_shot_eval(model: &SegModel, base: &LabelSpace, heldout: &[LabelRecord], scenes: &[Scene]) -> Result<ZeroShotReport> {
    let mut space = base.clone();
    for rec in heldout {
        space = space.extend(rec.clone())?.space;
    }
    let ids: Vec<usize> = (base.len()..space.len()).collect();
    let eval = evaluate(model, &space, scenes)?;
    let heldout_iou: Vec<Option<f64>> = ids.iter().map(|&i| eval.per_class_iou[i]).collect();
    let heldout_miou = heldout_iou.iter().any(Option::is_some).then(|| mean_present(&heldout_iou));
    Ok(ZeroShotReport {
        heldout_names: ids.iter().map(|&i| space.record(i).name.clone()).collect(),
        heldout_ids: ids,
        heldout_iou,
        heldout_miou,
        miou: eval.miou,
        per_class_iou: eval.per_class_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_prediction() {
        let truth = vec![0i64, 1, 2, 2];
        let (m, per) = miou(&[0, 1, 2, 2], &truth, 4).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per[3], None);
        assert_eq!(miou(&[3; 4], &[3; 4], 5).unwrap().0, 1.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let (m, per) = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_abs_diff_eq!(per[0].unwrap(), 0.5);
        assert_abs_diff_eq!(per[1].unwrap(), 2.0 / 3.0);
        assert_abs_diff_eq!(m, 7.0 / 12.0, epsilon = 1e-15);
    }

    #[test]
    fn predicted_only_class_counts_as_zero() {
        let (m, per) = miou(&[0, 2], &[0, 0], 3).unwrap();
        assert_eq!(per, vec![Some(0.5), None, Some(0.0)]);
        assert_abs_diff_eq!(m, 0.25);
    }

    #[test]
    fn ignore_pixels_are_excluded() {
        let (m, per) = miou(&[0, 1, 1], &[0, -1, 1], 2).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per, vec![Some(1.0), Some(1.0)]);
        assert!(matches!(miou(&[0, 1], &[-1, -1], 2), Err(Error::UndefinedMetric(_))));
        assert!(miou(&[0, 5], &[0, 1], 2).is_err());
    }
}
