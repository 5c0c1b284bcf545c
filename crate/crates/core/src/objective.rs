//! Per-image training objective of every strategy.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assign::Assignment;
use crate::detector::ResponseSet;
use crate::distill::{self, DistillConfig, SelectionMask, TopK};
use crate::loss::{detector_loss, DetectorLoss};
use crate::{Error, Result};

/// How an incremental step treats the old categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Joint training from scratch on every category seen so far.
    UpperBound,
    /// New-category supervision only.
    Finetune,
    /// Distil both branches at every location.
    KdAll,
    /// Distil both branches at the `k` most confident locations.
    TopK(TopK),
    /// Elastic selection, classification distillation only.
    ErdClsOnly,
    /// Elastic selection on both branches.
    ErdFull,
}

impl Strategy {
    pub const NAMES: [&'static str; 6] = ["upper_bound", "finetune", "kd_all", "topk", "erd_cls_only", "erd_full"];

    pub fn uses_teacher(self) -> bool {
        !matches!(self, Strategy::UpperBound | Strategy::Finetune)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::UpperBound => "upper_bound",
            Strategy::Finetune => "finetune",
            Strategy::KdAll => "kd_all",
            Strategy::TopK(_) => "topk",
            Strategy::ErdClsOnly => "erd_cls_only",
            Strategy::ErdFull => "erd_full",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::TopK(k) => write!(f, "topk:{k}"),
            s => f.write_str(s.name()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts the plain names plus `topk:<k>`; bare `topk` means `topk:all`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "upper_bound" => Strategy::UpperBound,
            "finetune" => Strategy::Finetune,
            "kd_all" => Strategy::KdAll,
            "topk" => Strategy::TopK(TopK::All),
            "erd_cls_only" => Strategy::ErdClsOnly,
            "erd_full" => Strategy::ErdFull,
            other => match other.strip_prefix("topk:") {
                Some(k) => Strategy::TopK(k.parse()?),
                None => {
                    return Err(Error::Config(format!(
                        "unknown strategy '{other}' (expected one of {})",
                        Strategy::NAMES.join(", ")
                    )))
                }
            },
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Distillation support of one image. `None` disables a branch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepSelection {
    pub cls: Option<Vec<Vec<usize>>>,
    pub reg: Option<Vec<Vec<usize>>>,
    /// Full elastic selection record, for dumps.
    pub mask: Option<SelectionMask>,
}

impl StepSelection {
    pub fn cls_count(&self) -> usize {
        self.cls.as_ref().map_or(0, |s| s.iter().map(Vec::len).sum())
    }

    pub fn reg_count(&self) -> usize {
        self.reg.as_ref().map_or(0, |s| s.iter().map(Vec::len).sum())
    }
}

/// Teacher locations the strategy distils on; `None` for strategies without
/// a teacher.
pub fn select_for_strategy(
    strategy: Strategy,
    teacher: &ResponseSet,
    old: &[usize],
    cfg: &DistillConfig,
) -> Result<Option<StepSelection>> {
    Ok(match strategy {
        Strategy::UpperBound | Strategy::Finetune => None,
        Strategy::KdAll => {
            let all = distill::select_all(teacher);
            Some(StepSelection { cls: Some(all.clone()), reg: Some(all), mask: None })
        }
        Strategy::TopK(k) => {
            let sel = distill::select_topk(teacher, old, k)?.selected;
            Some(StepSelection { cls: Some(sel.clone()), reg: Some(sel), mask: None })
        }
        Strategy::ErdClsOnly => {
            let cls = distill::ers_classification(teacher, old, cfg)?;
            let mask = SelectionMask { cls, reg: Default::default() };
            Some(StepSelection { cls: Some(mask.cls.selected.clone()), reg: None, mask: Some(mask) })
        }
        Strategy::ErdFull => {
            let mask = distill::ers(teacher, old, cfg)?;
            Some(StepSelection {
                cls: Some(mask.cls.selected.clone()),
                reg: Some(mask.reg.selected.clone()),
                mask: Some(mask),
            })
        }
    })
}

/// Loss terms of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub model: DetectorLoss,
    pub distill_cls: f64,
    pub distill_reg: f64,
    pub cls_selected: usize,
    pub reg_selected: usize,
}

/// Frozen-teacher inputs of the distillation terms.
pub struct TeacherSignal<'a> {
    pub responses: &'a ResponseSet,
    pub selection: &'a StepSelection,
    pub old: &'a [usize],
}

/// `L_model` on the `active` channels plus the weighted distillation terms.
/// When `grad` is given it is overwritten with d(total)/d(student responses).
pub fn image_objective(
    student: &ResponseSet,
    assignment: &Assignment,
    active: &[usize],
    teacher: Option<TeacherSignal<'_>>,
    cfg: &DistillConfig,
    mut grad: Option<&mut ResponseSet>,
) -> ObjectiveTerms {
    let model = detector_loss(student, assignment, active, grad.as_deref_mut());
    let mut terms = ObjectiveTerms { model, total: model.total, ..Default::default() };
    let Some(t) = teacher else { return terms };
    if let Some(sel) = &t.selection.cls {
        terms.distill_cls =
            distill::distill_cls_loss(t.responses, student, sel, t.old, cfg, grad.as_deref_mut().map(|g| (g, cfg.lambda_cls)));
        terms.cls_selected = t.selection.cls_count();
    }
    if let Some(sel) = &t.selection.reg {
        terms.distill_reg =
            distill::distill_reg_loss(t.responses, student, sel, cfg, grad.as_deref_mut().map(|g| (g, cfg.lambda_reg)));
        terms.reg_selected = t.selection.reg_count();
    }
    terms.total = distill::total_loss(model.total, terms.distill_cls, terms.distill_reg, cfg);
    terms
}
