//! COCO-style AP evaluation and activation distances between detectors.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::detector::{Activations, TinyDet};
use crate::scene::{Annotation, RgbImage};
use crate::{math, Error, Result};

pub const NUM_IOU_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean AP over IoU thresholds 0.50:0.05:0.95 and categories.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP at each IoU threshold, averaged over categories.
    pub ap_per_iou: Vec<f64>,
    /// Per-category AP averaged over IoU thresholds.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub per_class_ap50: BTreeMap<usize, f64>,
    /// Mean per-category AP over the base (first-step) categories.
    pub base_map: Option<f64>,
    /// Mean per-category AP over the remaining evaluated categories.
    pub new_map: Option<f64>,
    pub base_categories: Vec<usize>,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

struct Candidate {
    image: usize,
    index: usize,
    score: f64,
}

/// Greedy COCO matching and 101-point interpolated AP of one category at one
/// IoU threshold. `None` when the category has no ground truth.
pub fn category_ap(images: &[ImageResult], category: usize, iou_threshold: f64) -> Option<f64> {
    let num_gt: usize = images.iter().map(|im| im.ground_truth.iter().filter(|g| g.category_id == category).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut cands: Vec<Candidate> = Vec::new();
    for (image, im) in images.iter().enumerate() {
        for (index, d) in im.detections.iter().enumerate() {
            if d.category == category {
                cands.push(Candidate { image, index, score: d.score });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then((a.image, a.index).cmp(&(b.image, b.index)))
    });
    let mut matched: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let mut tp_flags = Vec::with_capacity(cands.len());
    for c in &cands {
        let im = &images[c.image];
        let det = im.detections[c.index].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in im.ground_truth.iter().enumerate() {
            if gt.category_id != category || matched[c.image][g] {
                continue;
            }
            let iou = det.iou(&gt.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[c.image][g] = true;
        }
        tp_flags.push(best.is_some());
    }
    Some(interpolated_ap(&tp_flags, num_gt))
}

/// 101-point interpolated AP from score-ordered TP flags.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &flag in tp_flags {
        if flag {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..NUM_RECALL_POINTS {
        let level = r as f64 / (NUM_RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / NUM_RECALL_POINTS as f64
}

/// Evaluates `categories` over a set of images. `base` names the categories
/// aggregated into `base_map`; the other evaluated categories form `new_map`.
pub fn evaluate_detections(images: &[ImageResult], categories: &[usize], base: &[usize]) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let thresholds = iou_thresholds();
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_ap50 = BTreeMap::new();
    let mut ap_per_iou = vec![0.0; NUM_IOU_THRESHOLDS];
    for &c in categories {
        let aps: Option<Vec<f64>> = thresholds.iter().map(|&t| category_ap(images, c, t)).collect();
        let Some(aps) = aps else { continue };
        for (acc, ap) in ap_per_iou.iter_mut().zip(&aps) {
            *acc += ap;
        }
        per_class_ap50.insert(c, aps[0]);
        per_class_ap.insert(c, aps.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64);
    }
    if per_class_ap.is_empty() {
        return Err(Error::Evaluation("no ground truth for any evaluated category".into()));
    }
    let n = per_class_ap.len() as f64;
    for v in &mut ap_per_iou {
        *v /= n;
    }
    let mean_over = |pred: &dyn Fn(usize) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_class_ap.iter().filter(|(c, _)| pred(**c)).map(|(_, v)| *v).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let base_map = mean_over(&|c| base.contains(&c));
    let new_map = mean_over(&|c| !base.contains(&c));
    let wanted = |c: usize| categories.contains(&c);
    Ok(MetricsReport {
        map: ap_per_iou.iter().sum::<f64>() / NUM_IOU_THRESHOLDS as f64,
        ap50: ap_per_iou[0],
        ap75: ap_per_iou[5],
        ap_per_iou,
        per_class_ap,
        per_class_ap50,
        base_map,
        new_map,
        base_categories: base.to_vec(),
        num_images: images.len(),
        num_detections: images.iter().flat_map(|i| &i.detections).filter(|d| wanted(d.category)).count(),
        num_ground_truth: images.iter().flat_map(|i| &i.ground_truth).filter(|g| wanted(g.category_id)).count(),
    })
}

/// Mean L2 distance between two detectors' activations per component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistanceReport {
    pub pyramid_features: f64,
    pub cls_head: f64,
    pub reg_head: f64,
}

impl DistanceReport {
    pub fn components(&self) -> [(&'static str, f64); 3] {
        [("pyramid_features", self.pyramid_features), ("cls_head", self.cls_head), ("reg_head", self.reg_head)]
    }
}

fn l2(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    math::sqrt(a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Per-component L2 norm of the activation difference on one image.
pub fn activation_distance(a: &Activations, b: &Activations) -> DistanceReport {
    let pyr = |x: &Activations| x.pyramid.iter().flat_map(|m| m.data.iter().map(|&v| v as f64)).collect::<Vec<_>>();
    let cls = |x: &Activations| x.responses.levels.iter().flat_map(|l| l.cls.iter().copied()).collect::<Vec<_>>();
    let reg = |x: &Activations| x.responses.levels.iter().flat_map(|l| l.reg.iter().copied()).collect::<Vec<_>>();
    DistanceReport {
        pyramid_features: l2(pyr(a).into_iter(), pyr(b).into_iter()),
        cls_head: l2(cls(a).into_iter(), cls(b).into_iter()),
        reg_head: l2(reg(a).into_iter(), reg(b).into_iter()),
    }
}

/// Averages [`activation_distance`] over probe images.
pub fn feature_distance(net: &TinyDet, params_a: &[f32], params_b: &[f32], probes: &[&RgbImage]) -> Result<DistanceReport> {
    if probes.is_empty() {
        return Err(Error::Evaluation("feature distance needs at least one probe image".into()));
    }
    let mut acc = DistanceReport::default();
    for img in probes {
        let d = activation_distance(&net.activations(params_a, img)?, &net.activations(params_b, img)?);
        acc.pyramid_features += d.pyramid_features;
        acc.cls_head += d.cls_head;
        acc.reg_head += d.reg_head;
    }
    let n = probes.len() as f64;
    Ok(DistanceReport { pyramid_features: acc.pyramid_features / n, cls_head: acc.cls_head / n, reg_head: acc.reg_head / n })
}
