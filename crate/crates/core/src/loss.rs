//! Detector training loss: sigmoid focal classification, distribution focal
//! loss over edge bins and an IoU loss on expectation-decoded boxes.

use alloc::vec;

use crate::assign::Assignment;
use crate::detector::ResponseSet;
use crate::math;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Loss value with its per-term breakdown. Every term is normalized by
/// `max(num_positives, 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectorLoss {
    pub total: f64,
    pub cls: f64,
    pub dfl: f64,
    pub iou: f64,
    pub num_positives: usize,
}

/// Focal loss of one logit against a binary target, and its derivative.
pub fn focal_term(x: f64, positive: bool) -> (f64, f64) {
    let p = math::sigmoid(x);
    if positive {
        let w = math::powi(1.0 - p, FOCAL_GAMMA as i32);
        let logp = math::log_sigmoid(x);
        (-FOCAL_ALPHA * w * logp, FOCAL_ALPHA * w * (FOCAL_GAMMA * p * logp - (1.0 - p)))
    } else {
        let w = math::powi(p, FOCAL_GAMMA as i32);
        let log1mp = math::log_sigmoid(-x);
        (-(1.0 - FOCAL_ALPHA) * w * log1mp, (1.0 - FOCAL_ALPHA) * w * (p - FOCAL_GAMMA * (1.0 - p) * log1mp))
    }
}

/// Distribution focal loss of one edge: cross-entropy against the two bins
/// bracketing `target`, weighted linearly by proximity. Writes d/d(logits).
pub fn dfl_term(logits: &[f64], target: f64, grad: Option<&mut [f64]>) -> f64 {
    let n = logits.len();
    let left = (math::floor(target) as usize).min(n - 2);
    let w_left = (left + 1) as f64 - target;
    let w_right = target - left as f64;
    let mut logp = vec![0.0; n];
    math::log_softmax_into(logits, &mut logp);
    let loss = -(w_left * logp[left] + w_right * logp[left + 1]);
    if let Some(g) = grad {
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = math::exp(logp[i]);
        }
        g[left] -= w_left;
        g[left + 1] -= w_right;
    }
    loss
}

/// `1 - IoU` between boxes given as edge distances from a shared point.
/// Returns the loss and d/d(predicted edges).
pub fn iou_term(pred: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = *pred;
    let [tl, tt, tr, tb] = *target;
    let (pw, ph) = (pl + pr, pt + pb);
    let area_p = pw * ph;
    let area_t = (tl + tr) * (tt + tb);
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    if union <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let step = |p: f64, t: f64| if p < t { 1.0 } else { 0.0 };
    let grad = [
        -(d_inter * ih * step(pl, tl) + d_area * ph),
        -(d_inter * iw * step(pt, tt) + d_area * pw),
        -(d_inter * ih * step(pr, tr) + d_area * ph),
        -(d_inter * iw * step(pb, tb) + d_area * pw),
    ];
    (1.0 - iou, grad)
}

/// Detector loss over `active` classification channels. When `grad` is given
/// it receives d(total)/d(logits) (overwriting, same shape as `responses`).
pub fn detector_loss(
    responses: &ResponseSet,
    assignment: &Assignment,
    active: &[usize],
    mut grad: Option<&mut ResponseSet>,
) -> DetectorLoss {
    let k = responses.num_categories;
    let n = responses.num_bins;
    let num_pos = assignment.num_positives();
    let norm = num_pos.max(1) as f64;
    if let Some(g) = grad.as_deref_mut() {
        for l in &mut g.levels {
            l.cls.fill(0.0);
            l.reg.fill(0.0);
        }
    }
    let (mut cls, mut dfl, mut iou) = (0.0, 0.0, 0.0);
    let mut probs = vec![0.0; n];
    let mut edge_grad = vec![0.0; n];
    for (li, (level, assign)) in responses.levels.iter().zip(&assignment.levels).enumerate() {
        for (loc, target) in assign.targets.iter().enumerate() {
            let logits = &level.cls[loc * k..(loc + 1) * k];
            let label = target.map(|t| t.category);
            for &c in active {
                let (l, d) = focal_term(logits[c], label == Some(c));
                cls += l;
                if let Some(g) = grad.as_deref_mut() {
                    g.levels[li].cls[loc * k + c] = d / norm;
                }
            }
            let Some(t) = target else { continue };
            let mut pred = [0.0; 4];
            for e in 0..4 {
                let edge = responses.edge_at(li, loc, e);
                math::softmax_into(edge, 1.0, &mut probs);
                pred[e] = probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
                dfl += 0.25 * dfl_term(edge, t.edges[e], Some(&mut edge_grad));
                if let Some(g) = grad.as_deref_mut() {
                    let start = (loc * 4 + e) * n;
                    for (gi, eg) in g.levels[li].reg[start..start + n].iter_mut().zip(&edge_grad) {
                        *gi = 0.25 * eg / norm;
                    }
                }
            }
            let (l_iou, d_pred) = iou_term(&pred, &t.edges);
            iou += l_iou;
            if let Some(g) = grad.as_deref_mut() {
                for e in 0..4 {
                    math::softmax_into(responses.edge_at(li, loc, e), 1.0, &mut probs);
                    let start = (loc * 4 + e) * n;
                    for (i, gi) in g.levels[li].reg[start..start + n].iter_mut().enumerate() {
                        *gi += d_pred[e] * probs[i] * (i as f64 - pred[e]) / norm;
                    }
                }
            }
        }
    }
    let (cls, dfl, iou) = (cls / norm, dfl / norm, iou / norm);
    DetectorLoss { total: cls + dfl + iou, cls, dfl, iou, num_positives: num_pos }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{LevelAssignment, Target};
    use crate::detector::LevelResponse;
    use crate::geometry::BoxF;
    use alloc::vec::Vec;

    fn single_level(k: usize, n: usize, locs: usize) -> (ResponseSet, Assignment) {
        let r = ResponseSet {
            num_categories: k,
            num_bins: n,
            levels: vec![LevelResponse { stride: 8, height: 1, width: locs, cls: vec![0.0; locs * k], reg: vec![0.0; locs * 4 * n] }],
        };
        let a = Assignment { levels: vec![LevelAssignment { stride: 8, height: 1, width: locs, targets: vec![None; locs] }] };
        (r, a)
    }

    #[test]
    fn dfl_between_bins_is_weighted_cross_entropy() {
        // Uniform logits over 8 bins, target 2.25: weights 0.75 / 0.25 on bins 2 / 3.
        let logits = [0.0; 8];
        let loss = dfl_term(&logits, 2.25, None);
        let expected = -(0.75 * (1.0f64 / 8.0).ln() + 0.25 * (1.0f64 / 8.0).ln());
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        // Non-uniform hand computation: logits (0, ln 3) over 2 bins, target 0.5.
        let l2 = dfl_term(&[0.0, 3f64.ln()], 0.5, None);
        let expected2 = -(0.5 * 0.25f64.ln() + 0.5 * 0.75f64.ln());
        assert!((l2 - expected2).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_predictions_have_vanishing_loss() {
        let (mut r, mut a) = single_level(3, 4, 2);
        a.levels[0].targets[0] = Some(Target { category: 1, edges: [1.0, 1.0, 2.0, 2.0], bbox: BoxF::new(0.0, 0.0, 1.0, 1.0) });
        let lvl = &mut r.levels[0];
        for loc in 0..2 {
            for c in 0..3 {
                lvl.cls[loc * 3 + c] = if loc == 0 && c == 1 { 60.0 } else { -60.0 };
            }
        }
        for (e, &d) in [1usize, 1, 2, 2].iter().enumerate() {
            for b in 0..4 {
                lvl.reg[e * 4 + b] = if b == d { 60.0 } else { -60.0 };
            }
        }
        let loss = detector_loss(&r, &a, &[0, 1, 2], None);
        assert!(loss.total < 1e-20, "{loss:?}");
    }

    #[test]
    fn duplicating_identical_positives_keeps_the_mean() {
        let target = Target { category: 0, edges: [1.3, 0.7, 2.2, 1.9], bbox: BoxF::new(0.0, 0.0, 1.0, 1.0) };
        let fill = |r: &mut ResponseSet, loc: usize| {
            let lvl = &mut r.levels[0];
            lvl.cls[loc * 2] = 0.4;
            lvl.cls[loc * 2 + 1] = -1.1;
            for i in 0..16 {
                lvl.reg[loc * 16 + i] = (i as f64 * 0.37).sin();
            }
        };
        let (mut r1, mut a1) = single_level(2, 4, 3);
        let (mut r2, mut a2) = single_level(2, 4, 3);
        for r in [&mut r1, &mut r2] {
            for v in &mut r.levels[0].cls {
                *v = -40.0;
            }
        }
        fill(&mut r1, 0);
        a1.levels[0].targets[0] = Some(target);
        fill(&mut r2, 0);
        fill(&mut r2, 1);
        a2.levels[0].targets[0] = Some(target);
        a2.levels[0].targets[1] = Some(target);
        let l1 = detector_loss(&r1, &a1, &[0, 1], None);
        let l2 = detector_loss(&r2, &a2, &[0, 1], None);
        assert!((l1.total - l2.total).abs() < 1e-12);
    }

    #[test]
    fn no_positives_leaves_classification_only() {
        let (r, a) = single_level(2, 4, 3);
        let loss = detector_loss(&r, &a, &[0, 1], None);
        assert_eq!(loss.num_positives, 0);
        assert_eq!(loss.dfl, 0.0);
        assert_eq!(loss.iou, 0.0);
        assert!(loss.cls > 0.0);
    }

    #[test]
    fn inactive_channels_are_ignored() {
        let (mut r, a) = single_level(3, 4, 2);
        let base = detector_loss(&r, &a, &[0], None).total;
        r.levels[0].cls[1] = 5.0;
        r.levels[0].cls[2] = 5.0;
        assert_eq!(detector_loss(&r, &a, &[0], None).total, base);
        let mut g = ResponseSet::zeros_like(&r);
        detector_loss(&r, &a, &[0], Some(&mut g));
        let grads: Vec<f64> = g.levels[0].cls.clone();
        assert_eq!(grads[1], 0.0);
        assert_eq!(grads[2], 0.0);
        assert_ne!(grads[0], 0.0);
    }
}
