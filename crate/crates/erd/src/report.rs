//! Plot-ready CSV tables built from run directories.
//!
//! | file | header |
//! |------|--------|
//! | `per_class_ap.csv` | `run,step,category,ap,ap50` |
//! | `aggregates.csv` | `run,step,strategy,map,ap50,ap75,base_map,new_map` |
//! | `losses.csv` | `run,step,epoch,iteration,lr,total,model,distill_cls,distill_reg` |
//! | `distance.csv` | `run_a,run_b,component,distance` |
//!
//! Ablation tables use [`ABLATION_HEADER`] followed by one `ap_c<id>` column
//! per category.

use std::fs;
use std::path::{Path, PathBuf};

use erd_core::eval::DistanceReport;

use crate::config::ExperimentConfig;
use crate::error::{format_err, io_err, Result};
use crate::trainer::{step_dir, LossRecord, StepMetrics};

pub const PER_CLASS_HEADER: [&str; 5] = ["run", "step", "category", "ap", "ap50"];
pub const AGGREGATE_HEADER: [&str; 8] = ["run", "step", "strategy", "map", "ap50", "ap75", "base_map", "new_map"];
pub const LOSS_HEADER: [&str; 9] = ["run", "step", "epoch", "iteration", "lr", "total", "model", "distill_cls", "distill_reg"];
pub const DISTANCE_HEADER: [&str; 4] = ["run_a", "run_b", "component", "distance"];
pub const ABLATION_HEADER: [&str; 19] = [
    "label",
    "strategy",
    "alpha1",
    "alpha2",
    "lambda1",
    "lambda2",
    "temperature",
    "kl_localization",
    "step",
    "map",
    "ap50",
    "ap75",
    "base_map",
    "new_map",
    "num_images",
    "num_detections",
    "num_ground_truth",
    "mean_cls_selected",
    "mean_reg_selected",
];

/// Everything persisted by one protocol run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub name: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub steps: Vec<StepMetrics>,
    pub losses: Vec<Vec<LossRecord>>,
}

impl RunRecord {
    pub fn final_step(&self) -> &StepMetrics {
        self.steps.last().expect("runs have at least one step")
    }
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let config = ExperimentConfig::load(&dir.join("config.toml"))?;
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    loop {
        let sd = step_dir(dir, steps.len());
        let metrics_path = sd.join("metrics.json");
        if !metrics_path.exists() {
            break;
        }
        let text = fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
        steps.push(serde_json::from_str(&text).map_err(|e| format_err(&metrics_path, e.to_string()))?);
        let loss_path = sd.join("losses.csv");
        let mut reader = csv::Reader::from_path(&loss_path).map_err(|e| format_err(&loss_path, e.to_string()))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<LossRecord>, _>>()
            .map_err(|e| format_err(&loss_path, e.to_string()))?;
        losses.push(rows);
    }
    if steps.is_empty() {
        return Err(format_err(dir, "no completed steps"));
    }
    let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(RunRecord { name, dir: dir.to_path_buf(), config, steps, losses })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| format_err(path, e.to_string()))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

macro_rules! row {
    ($w:expr, $path:expr, $rec:expr) => {
        $w.write_record($rec).map_err(|e| format_err($path, e.to_string()))?
    };
}

/// One row per category of each run's final step.
pub fn write_per_class(runs: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row!(w, path, PER_CLASS_HEADER);
    for run in runs {
        let s = run.final_step();
        for (c, ap) in &s.metrics.per_class_ap {
            let ap50 = s.metrics.per_class_ap50.get(c).copied().unwrap_or(0.0);
            row!(w, path, [run.name.clone(), s.step.to_string(), c.to_string(), ap.to_string(), ap50.to_string()]);
        }
    }
    finish(w, path)
}

/// One row per step of each run.
pub fn write_aggregates(runs: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row!(w, path, AGGREGATE_HEADER);
    for run in runs {
        for s in &run.steps {
            let m = &s.metrics;
            row!(
                w,
                path,
                [
                    run.name.clone(),
                    s.step.to_string(),
                    s.strategy.clone(),
                    m.map.to_string(),
                    m.ap50.to_string(),
                    m.ap75.to_string(),
                    opt(m.base_map),
                    opt(m.new_map),
                ]
            );
        }
    }
    finish(w, path)
}

pub fn write_losses(runs: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row!(w, path, LOSS_HEADER);
    for run in runs {
        for (step, rows) in run.losses.iter().enumerate() {
            for r in rows {
                row!(
                    w,
                    path,
                    [
                        run.name.clone(),
                        step.to_string(),
                        r.epoch.to_string(),
                        r.iteration.to_string(),
                        r.lr.to_string(),
                        r.total.to_string(),
                        r.model.to_string(),
                        r.distill_cls.to_string(),
                        r.distill_reg.to_string(),
                    ]
                );
            }
        }
    }
    finish(w, path)
}

/// Three component rows per compared pair.
pub fn write_distances(pairs: &[(String, String, DistanceReport)], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row!(w, path, DISTANCE_HEADER);
    for (a, b, d) in pairs {
        for (component, value) in d.components() {
            row!(w, path, [a.clone(), b.clone(), component.to_string(), value.to_string()]);
        }
    }
    finish(w, path)
}

/// One ablation configuration and the metrics of its final step.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub config: ExperimentConfig,
    pub metrics: StepMetrics,
}

pub fn ablation_header(num_categories: usize) -> Vec<String> {
    ABLATION_HEADER.iter().map(|s| s.to_string()).chain((0..num_categories).map(|c| format!("ap_c{c}"))).collect()
}

pub fn ablation_record(row: &AblationRow, num_categories: usize) -> Vec<String> {
    let d = &row.config.distill;
    let s = &row.metrics;
    let m = &s.metrics;
    let sel = s.selection.unwrap_or_default();
    let mut rec = vec![
        row.label.clone(),
        row.config.train.strategy.to_string(),
        d.alpha_cls.to_string(),
        d.alpha_reg.to_string(),
        d.lambda_cls.to_string(),
        d.lambda_reg.to_string(),
        d.temperature.to_string(),
        d.use_kl_localization.to_string(),
        s.step.to_string(),
        m.map.to_string(),
        m.ap50.to_string(),
        m.ap75.to_string(),
        opt(m.base_map),
        opt(m.new_map),
        m.num_images.to_string(),
        m.num_detections.to_string(),
        m.num_ground_truth.to_string(),
        sel.mean_cls_selected.to_string(),
        sel.mean_reg_selected.to_string(),
    ];
    rec.extend((0..num_categories).map(|c| opt(m.per_class_ap.get(&c).copied())));
    rec
}

pub fn write_ablation(rows: &[AblationRow], num_categories: usize, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row!(w, path, ablation_header(num_categories));
    for r in rows {
        row!(w, path, ablation_record(r, num_categories));
    }
    finish(w, path)
}
