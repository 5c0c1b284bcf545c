//! Base training, incremental steps and multi-step protocols.

use std::fs;
use std::path::Path;

use erd_core::assign::{assign_targets, Assignment};
use erd_core::decode::decode_boxes;
use erd_core::detector::{ResponseSet, TinyDet};
use erd_core::eval::{evaluate_detections, feature_distance, DistanceReport, ImageResult, MetricsReport};
use erd_core::objective::{image_objective, select_for_strategy, ObjectiveTerms, StepSelection, Strategy, TeacherSignal};
use erd_core::optim::{LrSchedule, Sgd};
use erd_core::scene::{filter_by_step, view_for_categories, Dataset, Scene, StepView, TaskSplit};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelChannels};
use crate::dataset_io::image_name;
use crate::dump::selection_dump;
use crate::error::{io_err, ErdError, Result};
use crate::snapshot::DetectorSnapshot;

/// Batch-mean loss terms of one optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub total: f64,
    pub model: f64,
    pub cls: f64,
    pub dfl: f64,
    pub iou: f64,
    pub distill_cls: f64,
    pub distill_reg: f64,
    pub cls_selected: f64,
    pub reg_selected: f64,
}

/// Per-image selection counts averaged over a step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub mean_cls_selected: f64,
    pub mean_reg_selected: f64,
    pub min_cls_selected: usize,
    pub max_cls_selected: usize,
    /// Fraction of images where the argmax fallback fired on some group.
    pub cls_fallback_rate: f64,
    pub reg_fallback_rate: f64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub strategy: String,
    pub categories_seen: Vec<usize>,
    pub new_categories: Vec<usize>,
    pub base_categories: Vec<usize>,
    pub train_images: usize,
    pub final_loss: f64,
    pub metrics: MetricsReport,
    pub selection: Option<SelectionSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainedStep {
    pub params: Vec<f32>,
    pub losses: Vec<LossRecord>,
    pub selection: Option<SelectionSummary>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub snapshot: DetectorSnapshot,
    pub metrics: StepMetrics,
    pub losses: Vec<LossRecord>,
}

struct Teacher<'a> {
    params: &'a [f32],
    old: &'a [usize],
    strategy: Strategy,
}

#[derive(Default)]
struct SelectionTally {
    images: usize,
    cls: usize,
    reg: usize,
    min_cls: Option<usize>,
    max_cls: usize,
    cls_fallbacks: usize,
    reg_fallbacks: usize,
}

impl SelectionTally {
    fn add(&mut self, sel: &StepSelection) {
        let c = sel.cls_count();
        self.images += 1;
        self.cls += c;
        self.reg += sel.reg_count();
        self.min_cls = Some(self.min_cls.map_or(c, |m| m.min(c)));
        self.max_cls = self.max_cls.max(c);
        if let Some(mask) = &sel.mask {
            self.cls_fallbacks += mask.cls.stats.iter().any(|s| s.fallback) as usize;
            self.reg_fallbacks += mask.reg.stats.iter().any(|s| s.fallback) as usize;
        }
    }

    fn summary(&self) -> Option<SelectionSummary> {
        let n = self.images.max(1) as f64;
        (self.images > 0).then(|| SelectionSummary {
            mean_cls_selected: self.cls as f64 / n,
            mean_reg_selected: self.reg as f64 / n,
            min_cls_selected: self.min_cls.unwrap_or(0),
            max_cls_selected: self.max_cls,
            cls_fallback_rate: self.cls_fallbacks as f64 / n,
            reg_fallback_rate: self.reg_fallbacks as f64 / n,
        })
    }
}

/// Trains and evaluates detectors for one experiment configuration.
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub config: &'a ExperimentConfig,
    net: TinyDet,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: &'a ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if dataset.spec.image_size != config.scene.image_size {
            return Err(ErdError::Config(format!(
                "dataset images are {}px, configuration expects {}px",
                dataset.spec.image_size, config.scene.image_size
            )));
        }
        let net = TinyDet::new(config.head.clone(), config.scene.image_size)?;
        Ok(Self { dataset, config, net })
    }

    pub fn network(&self) -> &TinyDet {
        &self.net
    }

    fn snapshot(&self, params: Vec<f32>, step: usize, categories_seen: Vec<usize>) -> DetectorSnapshot {
        DetectorSnapshot {
            head: self.config.head.clone(),
            image_size: self.config.scene.image_size,
            step,
            categories_seen,
            params,
        }
    }

    /// Trains a freshly initialized detector with `L_model` on every category
    /// of `view`.
    pub fn train_base(&self, view: &StepView) -> Result<TrainedStep> {
        if view.is_empty() {
            return Err(erd_core::Error::EmptyStep { step: 0 }.into());
        }
        let mut params = self.net.init_params(self.config.seed);
        let losses = self.optimize(&mut params, view, &view.categories, None, &self.config.train.lr)?;
        Ok(TrainedStep { params, losses: losses.0, selection: None })
    }

    /// One incremental step: the student starts as a copy of `teacher` and
    /// optimizes the strategy's objective on `view`. `old` are the categories
    /// distilled from the teacher.
    pub fn train_incremental_step(
        &self,
        teacher: &DetectorSnapshot,
        view: &StepView,
        old: &[usize],
        strategy: Strategy,
    ) -> Result<TrainedStep> {
        teacher.check_compatible(&self.config.head, self.config.scene.image_size)?;
        teacher.network()?;
        if view.is_empty() {
            return Err(ErdError::Config("incremental step has no training images".into()));
        }
        let mut active = view.categories.clone();
        if self.config.train.model_channels == ModelChannels::Seen {
            active.extend_from_slice(old);
            active.sort_unstable();
            active.dedup();
        }
        let mut params = teacher.params.clone();
        let schedule = self.config.train.lr.scaled(self.config.train.incremental_lr_scale);
        let ctx = strategy.uses_teacher().then_some(Teacher { params: &teacher.params, old, strategy });
        let (losses, selection) = self.optimize(&mut params, view, &active, ctx.as_ref(), &schedule)?;
        Ok(TrainedStep { params, losses, selection })
    }

    fn teacher_signal(&self, teacher: &Teacher<'_>, scene: &Scene) -> Result<(ResponseSet, StepSelection)> {
        let responses = self.net.forward(teacher.params, &scene.image)?;
        let selection = select_for_strategy(teacher.strategy, &responses, teacher.old, &self.config.distill)?
            .expect("strategy uses a teacher");
        Ok((responses, selection))
    }

    fn optimize(
        &self,
        params: &mut Vec<f32>,
        view: &StepView,
        active: &[usize],
        teacher: Option<&Teacher<'_>>,
        schedule: &LrSchedule,
    ) -> Result<(Vec<LossRecord>, Option<SelectionSummary>)> {
        let train = &self.config.train;
        let scenes = &self.dataset.train;
        let image_size = self.config.scene.image_size;
        let assignments: Vec<Assignment> =
            view.items.iter().map(|it| assign_targets(&it.annotations, &self.config.head, image_size)).collect();
        let cache: Option<Vec<(ResponseSet, StepSelection)>> = match teacher {
            Some(t) if train.teacher_cache => Some(
                view.items
                    .par_iter()
                    .map(|it| self.teacher_signal(t, &scenes[it.image_index]))
                    .collect::<Result<_>>()?,
            ),
            _ => None,
        };

        let per_item = |idx: usize, params: &[f32], grads: &mut [f32]| -> Result<(ObjectiveTerms, Option<StepSelection>)> {
            let scene = &scenes[view.items[idx].image_index];
            let computed;
            let signal = match (teacher, &cache) {
                (Some(_), Some(c)) => Some((&c[idx].0, &c[idx].1)),
                (Some(t), None) => {
                    computed = self.teacher_signal(t, scene)?;
                    Some((&computed.0, &computed.1))
                }
                (None, _) => None,
            };
            let (resp, fwd) = self.net.forward_train(params, &scene.image)?;
            let mut d_resp = ResponseSet::zeros_like(&resp);
            let signal_in = signal.map(|(r, s)| TeacherSignal { responses: r, selection: s, old: teacher.unwrap().old });
            let terms = image_objective(&resp, &assignments[idx], active, signal_in, &self.config.distill, Some(&mut d_resp));
            self.net.backward(params, &fwd, &d_resp, grads);
            Ok((terms, signal.map(|(_, s)| s.clone())))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..view.len()).collect();
        let mut opt = Sgd::new(train.sgd.clone(), params.len());
        let mut records = Vec::new();
        let mut tally = SelectionTally::default();
        let mut iteration = 0;
        for epoch in 0..train.epochs_per_step {
            order.shuffle(&mut rng);
            for batch in order.chunks(train.batch_size) {
                let mut grads = vec![0.0f32; params.len()];
                let results: Vec<(ObjectiveTerms, Option<StepSelection>)> = if train.deterministic {
                    let mut out = Vec::with_capacity(batch.len());
                    for &idx in batch {
                        out.push(per_item(idx, params, &mut grads)?);
                    }
                    out
                } else {
                    let (g, out) = batch
                        .par_iter()
                        .map(|&idx| {
                            let mut g = vec![0.0f32; params.len()];
                            per_item(idx, params, &mut g).map(|r| (g, vec![r]))
                        })
                        .try_reduce(
                            || (vec![0.0f32; params.len()], Vec::new()),
                            |(mut ga, mut ra), (gb, rb)| {
                                ga.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
                                ra.extend(rb);
                                Ok((ga, ra))
                            },
                        )?;
                    grads = g;
                    out
                };
                let scale = 1.0 / batch.len() as f32;
                grads.iter_mut().for_each(|g| *g *= scale);
                let record = batch_record(epoch, iteration, schedule.rate(epoch, iteration), &results);
                if !record.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(ErdError::Divergence {
                        epoch,
                        iteration,
                        detail: format!(
                            "loss {} (model {}, distill_cls {}, distill_reg {}) at lr {}",
                            record.total, record.model, record.distill_cls, record.distill_reg, record.lr
                        ),
                    });
                }
                if epoch == 0 {
                    results.iter().filter_map(|r| r.1.as_ref()).for_each(|s| tally.add(s));
                }
                let mut record = record;
                record.grad_norm = opt.step(params, &grads, record.lr);
                records.push(record);
                iteration += 1;
            }
            if let Some(last) = records.last() {
                log::info!("epoch {epoch}: loss {:.4} lr {:.2e}", last.total, last.lr);
            }
        }
        Ok((records, tally.summary()))
    }

    /// Selection dumps of the first `count` training images of `view`.
    pub fn selection_dumps(
        &self,
        teacher: &DetectorSnapshot,
        view: &StepView,
        old: &[usize],
        strategy: Strategy,
        count: usize,
    ) -> Result<Vec<(String, String)>> {
        if !strategy.uses_teacher() {
            return Ok(Vec::new());
        }
        let t = Teacher { params: &teacher.params, old, strategy };
        view.items
            .iter()
            .take(count)
            .map(|it| {
                let name = image_name(it.image_index);
                let (resp, sel) = self.teacher_signal(&t, &self.dataset.train[it.image_index])?;
                Ok((name.replace(".png", ".txt"), selection_dump(&name, &resp, &sel)))
            })
            .collect()
    }

    /// COCO-style metrics of `params` on the test partition restricted to
    /// `categories`; `base` forms the base aggregate.
    pub fn evaluate(&self, params: &[f32], categories: &[usize], base: &[usize]) -> Result<MetricsReport> {
        let view = view_for_categories(&self.dataset.test, categories, true);
        let images: Vec<ImageResult> = view
            .items
            .par_iter()
            .map(|it| {
                let resp = self.net.forward(params, &self.dataset.test[it.image_index].image)?;
                Ok(ImageResult {
                    detections: decode_boxes(&resp, &self.config.decode, Some(categories)),
                    ground_truth: it.annotations.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(evaluate_detections(&images, categories, base)?)
    }

    /// Test-partition indices of the feature-distance probe images.
    pub fn probe_indices(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let n = self.dataset.test.len();
        let mut idx = rand::seq::index::sample(&mut rng, n, self.config.probe_count.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn feature_distance(&self, a: &DetectorSnapshot, b: &DetectorSnapshot) -> Result<DistanceReport> {
        a.check_compatible(&self.config.head, self.config.scene.image_size)?;
        b.check_compatible(&self.config.head, self.config.scene.image_size)?;
        let probes: Vec<_> = self.probe_indices().into_iter().map(|i| &self.dataset.test[i].image).collect();
        Ok(feature_distance(&self.net, &a.params, &b.params, &probes)?)
    }
}

fn batch_record(epoch: usize, iteration: usize, lr: f64, results: &[(ObjectiveTerms, Option<StepSelection>)]) -> LossRecord {
    let n = results.len() as f64;
    let mut r = LossRecord { epoch, iteration, lr, ..Default::default() };
    for (t, _) in results {
        r.total += t.total / n;
        r.model += t.model.total / n;
        r.cls += t.model.cls / n;
        r.dfl += t.model.dfl / n;
        r.iou += t.model.iou / n;
        r.distill_cls += t.distill_cls / n;
        r.distill_reg += t.distill_reg / n;
        r.cls_selected += t.cls_selected as f64 / n;
        r.reg_selected += t.reg_selected as f64 / n;
    }
    r
}

/// Writes one step directory: `snapshot.bin`, `metrics.json`, `losses.csv`
/// and `selections/`.
pub fn persist_step(dir: &Path, result: &StepResult, dumps: &[(String, String)]) -> Result<()> {
    let sel_dir = dir.join("selections");
    fs::create_dir_all(&sel_dir).map_err(io_err(&sel_dir))?;
    result.snapshot.save(&dir.join("snapshot.bin"))?;
    let metrics = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&result.metrics).expect("metrics serialize");
    fs::write(&metrics, json + "\n").map_err(io_err(&metrics))?;
    let losses = dir.join("losses.csv");
    let mut w = csv::Writer::from_path(&losses).map_err(|e| crate::error::format_err(&losses, e.to_string()))?;
    for r in &result.losses {
        w.serialize(r).map_err(|e| crate::error::format_err(&losses, e.to_string()))?;
    }
    w.flush().map_err(io_err(&losses))?;
    for (name, text) in dumps {
        let p = sel_dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    Ok(())
}

pub fn step_dir(run_dir: &Path, step: usize) -> std::path::PathBuf {
    run_dir.join(format!("step_{step}"))
}

/// Runs every step of `split` with the configured strategy, persisting each
/// step under the run directory as soon as it finishes. A given `base`
/// snapshot replaces step-0 training.
pub fn run_protocol(
    dataset: &Dataset,
    config: &ExperimentConfig,
    split: &TaskSplit,
    base: Option<&DetectorSnapshot>,
) -> Result<Vec<StepResult>> {
    let trainer = Trainer::new(dataset, config)?;
    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let echo = run_dir.join("config.toml");
    fs::write(&echo, config.to_toml()).map_err(io_err(&echo))?;
    crate::dataset_io::save_split(split, &run_dir.join("split.txt"))?;

    let strategy = config.train.strategy;
    let base_categories = split.step(0)?.to_vec();
    let mut results: Vec<StepResult> = Vec::with_capacity(split.len());
    for step in 0..split.len() {
        let seen = split.seen_through(step);
        let new = split.step(step)?.to_vec();
        let view = filter_by_step(&dataset.train, split, step)?;
        let mut dumps = Vec::new();
        let trained = if step == 0 {
            match base {
                Some(b) => {
                    b.check_compatible(&config.head, config.scene.image_size)?;
                    TrainedStep { params: b.params.clone(), losses: Vec::new(), selection: None }
                }
                None => trainer.train_base(&view)?,
            }
        } else if strategy == Strategy::UpperBound {
            let joint = view_for_categories(&dataset.train, &seen, false);
            trainer.train_base(&joint)?
        } else {
            let teacher = &results[step - 1].snapshot;
            let old = split.seen_before(step);
            dumps = trainer.selection_dumps(teacher, &view, &old, strategy, config.train.dump_selections)?;
            let before = teacher.params.clone();
            let out = trainer.train_incremental_step(teacher, &view, &old, strategy)?;
            debug_assert_eq!(before, teacher.params);
            out
        };
        let metrics = trainer.evaluate(&trained.params, &seen, &base_categories)?;
        let result = StepResult {
            snapshot: trainer.snapshot(trained.params, step, seen.clone()),
            metrics: StepMetrics {
                step,
                strategy: if step == 0 { "base".into() } else { strategy.to_string() },
                categories_seen: seen,
                new_categories: new,
                base_categories: base_categories.clone(),
                train_images: view.len(),
                final_loss: trained.losses.last().map_or(0.0, |r| r.total),
                metrics,
                selection: trained.selection,
            },
            losses: trained.losses,
        };
        persist_step(&step_dir(&run_dir, step), &result, &dumps)?;
        log::info!("step {step} done: mAP {:.4}", result.metrics.metrics.map);
        results.push(result);
    }
    Ok(results)
}
