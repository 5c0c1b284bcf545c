//! Structured-text dumps of selections and response maps.
//!
//! ```text
//! # erd selection v1
//! image 000012.png
//! branch cls level 0 stride 8 grid 8x8
//! stats mean 0.0123 std 0.0456 threshold 0.1035 above 3 fallback false
//! row 0.001 0.002 ...
//! selected 10 11 19
//! ```
//!
//! One `row` line per grid row carries the confidences `G`. Branches with
//! image-wide statistics repeat the same `stats` line on every level.

use std::fmt::Write as _;

use erd_core::detector::ResponseSet;
use erd_core::distill::{BranchSelection, BranchStats, DistillConfig};
use erd_core::objective::StepSelection;

use crate::error::Result;

pub const DUMP_HEADER: &str = "# erd selection v1";

fn write_stats(out: &mut String, s: &BranchStats) {
    writeln!(
        out,
        "stats mean {:.6e} std {:.6e} threshold {:.6e} above {} fallback {}",
        s.mean, s.std, s.threshold, s.above, s.fallback
    )
    .unwrap();
}

fn stats_for(sel: &BranchSelection, level: usize) -> Option<&BranchStats> {
    sel.stats.iter().find(|s| s.level == Some(level)).or_else(|| sel.stats.iter().find(|s| s.level.is_none()))
}

fn write_grid(out: &mut String, values: &[f64], width: usize) {
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(out, "row {}", cells.join(" ")).unwrap();
    }
}

fn write_branch(out: &mut String, name: &str, responses: &ResponseSet, sel: &BranchSelection) {
    for (l, level) in responses.levels.iter().enumerate() {
        writeln!(out, "branch {name} level {l} stride {} grid {}x{}", level.stride, level.height, level.width).unwrap();
        if let Some(s) = stats_for(sel, l) {
            write_stats(out, s);
        }
        if let Some(conf) = sel.confidence.get(l) {
            write_grid(out, conf, level.width);
        }
        let idx: Vec<String> = sel.selected.get(l).map_or(Vec::new(), |v| v.iter().map(|i| i.to_string()).collect());
        writeln!(out, "selected {}", idx.join(" ")).unwrap();
    }
}

/// Renders the selection one strategy made on one teacher image.
pub fn selection_dump(image_name: &str, teacher: &ResponseSet, selection: &StepSelection) -> String {
    let mut out = format!("{DUMP_HEADER}\nimage {image_name}\n");
    if let Some(mask) = &selection.mask {
        write_branch(&mut out, "cls", teacher, &mask.cls);
        if selection.reg.is_some() {
            write_branch(&mut out, "reg", teacher, &mask.reg);
        }
        return out;
    }
    for (name, sel) in [("cls", &selection.cls), ("reg", &selection.reg)] {
        let Some(sel) = sel else { continue };
        let branch = BranchSelection { selected: sel.clone(), ..Default::default() };
        write_branch(&mut out, name, teacher, &branch);
    }
    out
}

/// Max-over-category confidence grid of one level with the elastic threshold
/// of that image and level.
pub fn response_map_dump(
    image_name: &str,
    responses: &ResponseSet,
    old: &[usize],
    level: usize,
    cfg: &DistillConfig,
) -> Result<String> {
    let sel = erd_core::distill::ers_classification(responses, old, cfg)?;
    let l = responses.levels.get(level).ok_or_else(|| {
        erd_core::Error::Shape(format!("level {level} out of range ({} levels)", responses.levels.len()))
    })?;
    let mut out = format!("{DUMP_HEADER}\nimage {image_name}\n");
    writeln!(out, "branch cls level {level} stride {} grid {}x{}", l.stride, l.height, l.width).unwrap();
    if let Some(s) = stats_for(&sel, level) {
        write_stats(&mut out, s);
    }
    write_grid(&mut out, &sel.confidence[level], l.width);
    let idx: Vec<String> = sel.selected[level].iter().map(|i| i.to_string()).collect();
    writeln!(out, "selected {}", idx.join(" ")).unwrap();
    Ok(out)
}

/// Parsed `row` values of the first `branch` block in a dump.
pub fn parse_grid(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip_while(|l| !l.starts_with("branch "))
        .skip(1)
        .take_while(|l| !l.starts_with("branch "))
        .filter_map(|l| l.strip_prefix("row "))
        .map(|r| r.split_whitespace().filter_map(|v| v.parse().ok()).collect())
        .collect()
}
