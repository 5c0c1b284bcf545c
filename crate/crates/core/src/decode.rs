//! Inference path: scores, expectation-decoded boxes and per-category NMS.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::ResponseSet;
use crate::geometry::{nms, BoxF};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxF,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Cap on detections per image after NMS, highest scores first.
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.6, max_detections: 100 }
    }
}

/// Decodes detections for the given categories (all channels when `None`).
pub fn decode_boxes(responses: &ResponseSet, cfg: &DecodeConfig, categories: Option<&[usize]>) -> Vec<Detection> {
    let k = responses.num_categories;
    let all: Vec<usize> = (0..k).collect();
    let cats = categories.unwrap_or(&all);
    let mut per_cat: Vec<(Vec<BoxF>, Vec<f64>)> = cats.iter().map(|_| (Vec::new(), Vec::new())).collect();
    for (li, level) in responses.levels.iter().enumerate() {
        for loc in 0..level.locations() {
            let logits = responses.cls_at(li, loc);
            let mut decoded: Option<BoxF> = None;
            for (ci, &c) in cats.iter().enumerate() {
                let score = math::sigmoid(logits[c]);
                if score < cfg.score_threshold {
                    continue;
                }
                let b = *decoded.get_or_insert_with(|| responses.decoded_box(li, loc));
                per_cat[ci].0.push(b);
                per_cat[ci].1.push(score);
            }
        }
    }
    let mut out = Vec::new();
    for (&c, (boxes, scores)) in cats.iter().zip(&per_cat) {
        for i in nms(boxes, scores, cfg.nms_iou) {
            out.push(Detection { bbox: boxes[i], category: c, score: scores[i] });
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    out.truncate(cfg.max_detections);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::LevelResponse;
    use alloc::vec;

    #[test]
    fn overlapping_candidates_are_suppressed_per_category() {
        // Two locations, one category; one-hot bins make boxes exact.
        let n = 4;
        let mut lvl = LevelResponse { stride: 8, height: 1, width: 2, cls: vec![2.0, 1.0], reg: vec![-50.0; 2 * 4 * n] };
        // loc 0 centered at (4, 4): edges (l,t,r,b) = (0,0,3,3) -> box (4,4,28,28)
        // loc 1 centered at (12, 4): edges (1,0,2,3) -> box (4,4,28,28)
        for (loc, edges) in [(0usize, [0usize, 0, 3, 3]), (1, [1, 0, 2, 3])] {
            for (e, &bin) in edges.iter().enumerate() {
                lvl.reg[(loc * 4 + e) * n + bin] = 50.0;
            }
        }
        let r = ResponseSet { num_categories: 1, num_bins: n, levels: vec![lvl] };
        let dets = decode_boxes(&r, &DecodeConfig { score_threshold: 0.05, nms_iou: 0.5, max_detections: 10 }, None);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - math::sigmoid(2.0)).abs() < 1e-12);
        assert!((dets[0].bbox.x_min - 4.0).abs() < 1e-9 && (dets[0].bbox.x_max - 28.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_filters_low_scores() {
        let lvl = LevelResponse { stride: 8, height: 1, width: 1, cls: vec![-10.0], reg: vec![0.0; 16] };
        let r = ResponseSet { num_categories: 1, num_bins: 4, levels: vec![lvl] };
        assert!(decode_boxes(&r, &DecodeConfig::default(), None).is_empty());
    }
}
