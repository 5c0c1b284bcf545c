//! Elastic response selection and the selective distillation losses.
//!
//! Teacher and student share one architecture, so a selected location index
//! addresses the same response in both.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::ResponseSet;
use crate::geometry::{nms, BoxF};
use crate::{math, Error, Result};

/// Floor applied to probabilities inside the KL logarithm.
pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxConfidence {
    /// Mean of the four per-edge Top-1 probabilities.
    Mean,
    /// Minimum of the four per-edge Top-1 probabilities.
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Threshold multiplier of the classification branch.
    pub alpha_cls: f64,
    /// Threshold multiplier of the regression branch.
    pub alpha_reg: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub temperature: f64,
    /// IoU above which ERS drops a lower-confidence regression candidate.
    pub nms_iou: f64,
    /// Threshold statistics per pyramid level instead of per image.
    pub per_level_stats: bool,
    /// KL localization loss; `false` switches to squared error of the
    /// softened bin distributions.
    pub use_kl_localization: bool,
    /// Divide each distillation sum by its selection count.
    pub normalize: bool,
    /// Distil softened old-class distributions instead of raw logits.
    pub soften_cls: bool,
    pub box_confidence: BoxConfidence,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_cls: 2.0,
            alpha_reg: 2.0,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            temperature: 1.0,
            nms_iou: 0.5,
            per_level_stats: true,
            use_kl_localization: true,
            normalize: true,
            soften_cls: false,
            box_confidence: BoxConfidence::Mean,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_cls >= 0.0
            && self.alpha_reg >= 0.0
            && self.lambda_cls >= 0.0
            && self.lambda_reg >= 0.0
            && self.temperature > 0.0
            && self.nms_iou > 0.0
            && self.nms_iou <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distillation config: {self:?}")))
        }
    }
}

/// Threshold statistics of one group of responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    /// Level the group covers; `None` for image-wide statistics.
    pub level: Option<usize>,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    /// Responses with confidence at or above the threshold.
    pub above: usize,
    /// Whether the argmax fallback fired.
    pub fallback: bool,
}

/// Per-level selection of one branch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchSelection {
    /// Confidence `G` of every location, per level.
    pub confidence: Vec<Vec<f64>>,
    /// Locations with `G >= threshold`, per level, ascending.
    pub above_threshold: Vec<Vec<usize>>,
    /// Final selection (after fallback and, for boxes, NMS), ascending.
    pub selected: Vec<Vec<usize>>,
    pub stats: Vec<BranchStats>,
}

impl BranchSelection {
    pub fn count(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }
}

/// Both branch selections for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionMask {
    pub cls: BranchSelection,
    pub reg: BranchSelection,
}

/// Temperature-softened probability distribution.
pub fn soften(logits: &[f64], t: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    math::softmax_into(logits, t, &mut out);
    out
}

/// Max over old-category channels of the sigmoid probability, per location.
pub fn cls_confidence(teacher: &ResponseSet, old: &[usize]) -> Result<Vec<Vec<f64>>> {
    if old.is_empty() {
        return Err(Error::Selection("no old categories: the teacher has no knowledge to distil".into()));
    }
    if let Some(&c) = old.iter().find(|&&c| c >= teacher.num_categories) {
        return Err(Error::Selection(format!("old category {c} outside the {}-channel head", teacher.num_categories)));
    }
    Ok((0..teacher.levels.len())
        .map(|li| {
            (0..teacher.levels[li].locations())
                .map(|loc| {
                    let logits = teacher.cls_at(li, loc);
                    let best = old.iter().map(|&c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
                    math::sigmoid(best)
                })
                .collect()
        })
        .collect())
}

/// Top-1 bin probability of each edge, aggregated per location.
pub fn box_confidence(teacher: &ResponseSet, mode: BoxConfidence) -> Vec<Vec<f64>> {
    let mut probs = vec![0.0; teacher.num_bins];
    (0..teacher.levels.len())
        .map(|li| {
            (0..teacher.levels[li].locations())
                .map(|loc| {
                    let mut top = [0.0; 4];
                    for (e, t) in top.iter_mut().enumerate() {
                        math::softmax_into(teacher.edge_at(li, loc, e), 1.0, &mut probs);
                        *t = probs.iter().copied().fold(0.0, f64::max);
                    }
                    match mode {
                        BoxConfidence::Mean => top.iter().sum::<f64>() / 4.0,
                        BoxConfidence::Min => top.iter().copied().fold(f64::INFINITY, f64::min),
                    }
                })
                .collect()
        })
        .collect()
}

/// Applies `G >= mean + alpha * std` per statistics group. Groups with an
/// empty result fall back to their first argmax.
pub fn threshold_select(confidence: Vec<Vec<f64>>, alpha: f64, per_level: bool) -> BranchSelection {
    let groups: Vec<Vec<usize>> = if per_level {
        (0..confidence.len()).map(|l| vec![l]).collect()
    } else {
        vec![(0..confidence.len()).collect()]
    };
    let mut above_threshold = vec![Vec::new(); confidence.len()];
    let mut selected = vec![Vec::new(); confidence.len()];
    let mut stats = Vec::with_capacity(groups.len());
    for levels in groups {
        let values: Vec<f64> = levels.iter().flat_map(|&l| confidence[l].iter().copied()).collect();
        let (mean, std) = math::mean_std(&values);
        let threshold = mean + alpha * std;
        let mut above = 0;
        let mut best: Option<(usize, usize, f64)> = None;
        for &l in &levels {
            for (loc, &g) in confidence[l].iter().enumerate() {
                if g >= threshold {
                    above_threshold[l].push(loc);
                    above += 1;
                }
                if best.is_none_or(|(_, _, b)| g > b) {
                    best = Some((l, loc, g));
                }
            }
        }
        let fallback = above == 0 && best.is_some();
        for &l in &levels {
            selected[l] = above_threshold[l].clone();
        }
        if let (true, Some((l, loc, _))) = (fallback, best) {
            selected[l].push(loc);
        }
        stats.push(BranchStats {
            level: if per_level { Some(levels[0]) } else { None },
            mean,
            std,
            threshold,
            above,
            fallback,
        });
    }
    BranchSelection { confidence, above_threshold, selected, stats }
}

/// Classification branch of elastic response selection.
pub fn ers_classification(teacher: &ResponseSet, old: &[usize], cfg: &DistillConfig) -> Result<BranchSelection> {
    let confidence = cls_confidence(teacher, old)?;
    Ok(threshold_select(confidence, cfg.alpha_cls, cfg.per_level_stats))
}

/// Regression branch of elastic response selection: statistical threshold on
/// box confidence, then NMS over the teacher's decoded candidate boxes.
pub fn ers_regression(teacher: &ResponseSet, cfg: &DistillConfig) -> BranchSelection {
    let confidence = box_confidence(teacher, cfg.box_confidence);
    let mut sel = threshold_select(confidence, cfg.alpha_reg, cfg.per_level_stats);
    let mut cand: Vec<(usize, usize)> = Vec::new();
    for (l, locs) in sel.selected.iter().enumerate() {
        cand.extend(locs.iter().map(|&loc| (l, loc)));
    }
    let boxes: Vec<BoxF> = cand.iter().map(|&(l, loc)| teacher.decoded_box(l, loc)).collect();
    let scores: Vec<f64> = cand.iter().map(|&(l, loc)| sel.confidence[l][loc]).collect();
    let mut kept = vec![Vec::new(); sel.selected.len()];
    for i in nms(&boxes, &scores, cfg.nms_iou) {
        kept[cand[i].0].push(cand[i].1);
    }
    for k in &mut kept {
        k.sort_unstable();
    }
    sel.selected = kept;
    sel
}

/// Full elastic response selection for one teacher output.
pub fn ers(teacher: &ResponseSet, old: &[usize], cfg: &DistillConfig) -> Result<SelectionMask> {
    Ok(SelectionMask { cls: ers_classification(teacher, old, cfg)?, reg: ers_regression(teacher, cfg) })
}

/// Fixed-count selection size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    Count(usize),
    All,
}

impl core::fmt::Display for TopK {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TopK::Count(k) => write!(f, "{k}"),
            TopK::All => f.write_str("all"),
        }
    }
}

impl core::str::FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(TopK::All);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .map(TopK::Count)
            .ok_or_else(|| Error::Config(format!("k must be a positive integer or 'all', got '{s}'")))
    }
}

/// The `k` most confident classification locations across all levels.
/// Ties keep the lower `(level, location)`.
pub fn select_topk(teacher: &ResponseSet, old: &[usize], k: TopK) -> Result<BranchSelection> {
    let confidence = cls_confidence(teacher, old)?;
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (l, gs) in confidence.iter().enumerate() {
        ranked.extend(gs.iter().enumerate().map(|(loc, &g)| (l, loc, g)));
    }
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then((a.0, a.1).cmp(&(b.0, b.1))));
    let take = match k {
        TopK::Count(k) => k.min(ranked.len()),
        TopK::All => ranked.len(),
    };
    let mut selected = vec![Vec::new(); confidence.len()];
    for &(l, loc, _) in &ranked[..take] {
        selected[l].push(loc);
    }
    for s in &mut selected {
        s.sort_unstable();
    }
    Ok(BranchSelection { above_threshold: selected.clone(), selected, confidence, stats: Vec::new() })
}

/// Every location of every level.
pub fn select_all(teacher: &ResponseSet) -> Vec<Vec<usize>> {
    teacher.levels.iter().map(|l| (0..l.locations()).collect()).collect()
}

fn selection_size(selection: &[Vec<usize>]) -> usize {
    selection.iter().map(Vec::len).sum()
}

/// Squared-error distillation of old-category classification responses over
/// the selected locations, divided by the selection count when normalizing.
///
/// With `grad = Some((g, w))`, `w * dL/d(student)` is added into `g`.
pub fn distill_cls_loss(
    teacher: &ResponseSet,
    student: &ResponseSet,
    selection: &[Vec<usize>],
    old: &[usize],
    cfg: &DistillConfig,
    mut grad: Option<(&mut ResponseSet, f64)>,
) -> f64 {
    assert!(teacher.same_shape(student), "teacher/student response shapes differ");
    let m = selection_size(selection);
    if m == 0 || old.is_empty() {
        log::warn!("classification distillation skipped: empty selection");
        return 0.0;
    }
    let k = teacher.num_categories;
    let norm = if cfg.normalize { m as f64 } else { 1.0 };
    let mut total = 0.0;
    let mut t_logits = vec![0.0; old.len()];
    let mut s_logits = vec![0.0; old.len()];
    let mut p_t = vec![0.0; old.len()];
    let mut p_s = vec![0.0; old.len()];
    for (l, locs) in selection.iter().enumerate() {
        for &loc in locs {
            let t = teacher.cls_at(l, loc);
            let s = student.cls_at(l, loc);
            if cfg.soften_cls {
                for (i, &c) in old.iter().enumerate() {
                    t_logits[i] = t[c];
                    s_logits[i] = s[c];
                }
                math::softmax_into(&t_logits, cfg.temperature, &mut p_t);
                math::softmax_into(&s_logits, cfg.temperature, &mut p_s);
                let (loss, dx) = l2_on_softmax(&p_t, &p_s, cfg.temperature);
                total += loss;
                if let Some((g, w)) = grad.as_mut() {
                    for (i, &c) in old.iter().enumerate() {
                        g.levels[l].cls[loc * k + c] += *w * dx[i] / norm;
                    }
                }
            } else {
                for &c in old {
                    let diff = t[c] - s[c];
                    total += diff * diff;
                    if let Some((g, w)) = grad.as_mut() {
                        g.levels[l].cls[loc * k + c] += *w * (-2.0 * diff) / norm;
                    }
                }
            }
        }
    }
    total / norm
}

/// `sum (p_t - p_s)^2` and its gradient w.r.t. the student logits.
fn l2_on_softmax(p_t: &[f64], p_s: &[f64], t: f64) -> (f64, Vec<f64>) {
    let g: Vec<f64> = p_t.iter().zip(p_s).map(|(a, b)| -2.0 * (a - b)).collect();
    let loss = p_t.iter().zip(p_s).map(|(a, b)| (a - b) * (a - b)).sum();
    let dot: f64 = p_s.iter().zip(&g).map(|(p, gi)| p * gi).sum();
    let dx = p_s.iter().zip(&g).map(|(p, gi)| p * (gi - dot) / t).collect();
    (loss, dx)
}

/// `KL(p_t || p_s)` from log-probabilities, both floored at [`KL_EPSILON`];
/// returns the loss and its gradient w.r.t. the student logits.
fn kl_on_log_softmax(log_t: &[f64], log_s: &[f64], p_s: &[f64], t: f64) -> (f64, Vec<f64>) {
    let floor = math::ln(KL_EPSILON);
    let mut loss = 0.0;
    let mut weights = vec![0.0; log_t.len()];
    for i in 0..log_t.len() {
        let pt = math::exp(log_t[i]);
        if pt == 0.0 {
            continue;
        }
        loss += pt * (log_t[i].max(floor) - log_s[i].max(floor));
        if log_s[i] > floor {
            weights[i] = pt;
        }
    }
    let mass: f64 = weights.iter().sum();
    let dx = weights.iter().zip(p_s).map(|(w, p)| -(w - p * mass) / t).collect();
    (loss, dx)
}

fn log_softmax_t(logits: &[f64], t: f64, out: &mut [f64]) {
    let scaled: Vec<f64> = logits.iter().map(|x| x / t).collect();
    math::log_softmax_into(&scaled, out);
}

/// Localization distillation over the selected boxes: per box, the sum over
/// its four edges of `KL(soften(teacher, t) || soften(student, t))` (or the
/// squared-error fallback), then divided by the box count when normalizing.
pub fn distill_reg_loss(
    teacher: &ResponseSet,
    student: &ResponseSet,
    selection: &[Vec<usize>],
    cfg: &DistillConfig,
    mut grad: Option<(&mut ResponseSet, f64)>,
) -> f64 {
    assert!(teacher.same_shape(student), "teacher/student response shapes differ");
    let j = selection_size(selection);
    if j == 0 {
        log::warn!("localization distillation skipped: empty selection");
        return 0.0;
    }
    let n = teacher.num_bins;
    let t = cfg.temperature;
    let norm = if cfg.normalize { j as f64 } else { 1.0 };
    let mut total = 0.0;
    let (mut log_t, mut log_s) = (vec![0.0; n], vec![0.0; n]);
    let (mut p_t, mut p_s) = (vec![0.0; n], vec![0.0; n]);
    for (l, locs) in selection.iter().enumerate() {
        for &loc in locs {
            for e in 0..4 {
                let te = teacher.edge_at(l, loc, e);
                let se = student.edge_at(l, loc, e);
                math::softmax_into(se, t, &mut p_s);
                let (loss, dx) = if cfg.use_kl_localization {
                    log_softmax_t(te, t, &mut log_t);
                    log_softmax_t(se, t, &mut log_s);
                    kl_on_log_softmax(&log_t, &log_s, &p_s, t)
                } else {
                    math::softmax_into(te, t, &mut p_t);
                    l2_on_softmax(&p_t, &p_s, t)
                };
                total += loss;
                if let Some((g, w)) = grad.as_mut() {
                    let start = (loc * 4 + e) * n;
                    for (gi, d) in g.levels[l].reg[start..start + n].iter_mut().zip(&dx) {
                        *gi += *w * d / norm;
                    }
                }
            }
        }
    }
    total / norm
}

/// Weighted objective `L_model + lambda_cls * L_cls + lambda_reg * L_reg`.
pub fn total_loss(model: f64, cls: f64, reg: f64, cfg: &DistillConfig) -> f64 {
    model + cfg.lambda_cls * cls + cfg.lambda_reg * reg
}
