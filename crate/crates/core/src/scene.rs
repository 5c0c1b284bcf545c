//! Synthetic shape scenes and class-incremental task splits.
//!
//! A category is a `(shape, color)` pair: `shape = id / 4`, `color = id % 4`.
//! Images are square RGB buffers with a textured gray background and filled
//! shapes whose tight bounding boxes are the annotations.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BoxF;
use crate::{math, Error, Result};

pub const NUM_COLORS: usize = 4;
pub const NUM_SHAPES: usize = 6;
pub const MAX_CATEGORIES: usize = NUM_COLORS * NUM_SHAPES;

/// Pairwise IoU cap between objects of one image.
pub const MAX_PAIR_IOU: f64 = 0.3;
/// Cap on intersection over the smaller area, so no object is hidden.
pub const MAX_PAIR_COVERAGE: f64 = 0.5;

const PALETTE: [[u8; 3]; NUM_COLORS] = [[220, 40, 40], [40, 190, 60], [50, 80, 230], [230, 210, 40]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    pub fn of_category(category: usize) -> Shape {
        match category / NUM_COLORS {
            0 => Shape::Rectangle,
            1 => Shape::Ellipse,
            2 => Shape::Triangle,
            3 => Shape::Diamond,
            4 => Shape::Cross,
            _ => Shape::Ring,
        }
    }

    /// Membership test in box-normalized coordinates `u, v ∈ [0, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (x, y) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        match self {
            Shape::Rectangle => true,
            Shape::Ellipse => x * x + y * y <= 1.0,
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
            Shape::Diamond => x.abs() + y.abs() <= 1.0,
            Shape::Cross => x.abs() <= 1.0 / 3.0 || y.abs() <= 1.0 / 3.0,
            Shape::Ring => {
                let r2 = x * x + y * y;
                (0.36..=1.0).contains(&r2)
            }
        }
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: u32,
    pub num_categories: usize,
    /// Inclusive `(min, max)` object count per image.
    pub objects_per_image: (usize, usize),
    pub min_box_side: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { image_size: 128, num_categories: 16, objects_per_image: (1, 6), min_box_side: 12, seed: 0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSceneSpec(msg));
        if self.min_box_side == 0 {
            return bad("min_box_side must be positive".into());
        }
        if self.image_size < 4 * self.min_box_side {
            return bad(format!(
                "image_size {} must be at least 4 x min_box_side ({})",
                self.image_size,
                4 * self.min_box_side
            ));
        }
        if self.num_categories < 2 {
            return bad(format!("num_categories {} must be at least 2", self.num_categories));
        }
        if self.num_categories > MAX_CATEGORIES {
            return bad(format!(
                "num_categories {} exceeds the {} renderable (shape, color) pairs",
                self.num_categories, MAX_CATEGORIES
            ));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_image range ({lo}, {hi}) must be positive and ordered"));
        }
        Ok(())
    }

    /// Largest generated box side.
    pub fn max_box_side(&self) -> u32 {
        self.image_size / 2
    }
}

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category_id: usize,
    pub bbox: BoxF,
}

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// An image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

/// In-memory dataset with train and test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn annotation_count(scenes: &[Scene]) -> usize {
        scenes.iter().map(|s| s.annotations.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Partition::Train => 1,
            Partition::Test => 2,
        }
    }
}

/// Renders a deterministic dataset for `spec`.
pub fn generate_dataset(spec: &SceneSpec, num_train: usize, num_test: usize) -> Result<Dataset> {
    spec.validate()?;
    if num_train == 0 || num_test == 0 {
        return Err(Error::InvalidSceneSpec("train and test counts must be positive".into()));
    }
    let train = generate_partition(spec, Partition::Train, num_train)?;
    let test = generate_partition(spec, Partition::Test, num_test)?;
    Ok(Dataset { spec: spec.clone(), train, test })
}

fn generate_partition(spec: &SceneSpec, partition: Partition, count: usize) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(partition.stream());
    let mut scenes = Vec::with_capacity(count);
    for index in 0..count {
        scenes.push(generate_scene(spec, index % spec.num_categories, &mut rng)?);
    }
    let covered: BTreeSet<usize> =
        scenes.iter().flat_map(|s| s.annotations.iter().map(|a| a.category_id)).collect();
    if covered.len() < spec.num_categories {
        return Err(Error::Generation(format!(
            "{} partition of {} images covers only {} of {} categories",
            partition.name(),
            count,
            covered.len(),
            spec.num_categories
        )));
    }
    Ok(scenes)
}

fn generate_scene(spec: &SceneSpec, first_category: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    const IMAGE_ATTEMPTS: usize = 20;
    const OBJECT_ATTEMPTS: usize = 200;
    let (lo, hi) = spec.objects_per_image;
    let target = rng.gen_range(lo..=hi);
    let size = spec.image_size;
    let (min_side, max_side) = (spec.min_box_side, spec.max_box_side());

    let mut placed: Vec<Annotation> = Vec::new();
    for _ in 0..IMAGE_ATTEMPTS {
        placed.clear();
        for k in 0..target {
            let category = if k == 0 { first_category } else { rng.gen_range(0..spec.num_categories) };
            for _ in 0..OBJECT_ATTEMPTS {
                let w = rng.gen_range(min_side..=max_side);
                let h = rng.gen_range(min_side..=max_side);
                let x = rng.gen_range(0..=size - w);
                let y = rng.gen_range(0..=size - h);
                let bbox = BoxF::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
                let fits = placed.iter().all(|other| {
                    let inter = bbox.intersection(&other.bbox);
                    bbox.iou(&other.bbox) <= MAX_PAIR_IOU
                        && inter <= MAX_PAIR_COVERAGE * bbox.area().min(other.bbox.area())
                });
                if fits {
                    placed.push(Annotation { category_id: category, bbox });
                    break;
                }
            }
        }
        if placed.len() >= lo {
            break;
        }
    }
    if placed.len() < lo {
        return Err(Error::Generation(format!(
            "could not place {lo} objects of side >= {min_side} in a {size}x{size} image with pairwise IoU <= {MAX_PAIR_IOU}"
        )));
    }
    let image = render(spec, &placed, rng);
    Ok(Scene { image, annotations: placed })
}

fn render(spec: &SceneSpec, objects: &[Annotation], rng: &mut ChaCha8Rng) -> RgbImage {
    let size = spec.image_size;
    let mut image = RgbImage::new(size, size);
    // Gray background with a low-frequency stripe pattern and pixel noise.
    let phase: f64 = rng.gen_range(0.0..6.283);
    let freq: f64 = rng.gen_range(0.05..0.2);
    for y in 0..size {
        for x in 0..size {
            let wave = 12.0 * libm::sin(freq * (x as f64 + 0.7 * y as f64) + phase);
            let noise: f64 = rng.gen_range(-18.0..18.0);
            let v = (110.0 + wave + noise).clamp(0.0, 255.0) as u8;
            image.put(x, y, [v, v, v]);
        }
    }
    // Larger objects first so no smaller object is painted over.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[b].bbox.area().partial_cmp(&objects[a].bbox.area()).unwrap_or(core::cmp::Ordering::Equal)
    });
    for idx in order {
        let ann = &objects[idx];
        let shape = Shape::of_category(ann.category_id);
        let base = PALETTE[ann.category_id % NUM_COLORS];
        let mut color = [0u8; 3];
        for (c, b) in color.iter_mut().zip(base) {
            *c = (b as i32 + rng.gen_range(-20..=20)).clamp(0, 255) as u8;
        }
        let b = ann.bbox;
        let (w, h) = (b.width(), b.height());
        for y in b.y_min as u32..b.y_max as u32 {
            for x in b.x_min as u32..b.x_max as u32 {
                let u = (x as f64 + 0.5 - b.x_min) / w;
                let v = (y as f64 + 0.5 - b.y_min) / h;
                if shape.contains(u, v) {
                    image.put(x, y, color);
                }
            }
        }
    }
    image
}

/// Ordered category subsets introduced one step at a time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    steps: Vec<Vec<usize>>,
}

impl TaskSplit {
    pub fn new(steps: Vec<Vec<usize>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Protocol("a split needs at least one step".into()));
        }
        let mut seen = BTreeSet::new();
        for (t, step) in steps.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::Protocol(format!("step {t} is empty")));
            }
            for &c in step {
                if !seen.insert(c) {
                    return Err(Error::Protocol(format!("category {c} appears in more than one step")));
                }
            }
        }
        let steps = steps
            .into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s
            })
            .collect();
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: usize) -> Result<&[usize]> {
        self.steps
            .get(index)
            .map(Vec::as_slice)
            .ok_or(Error::StepOutOfRange { index, len: self.steps.len() })
    }

    /// Categories introduced strictly before `step`.
    pub fn seen_before(&self, step: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.steps[..step.min(self.steps.len())].concat();
        out.sort_unstable();
        out
    }

    /// Categories introduced up to and including `step`.
    pub fn seen_through(&self, step: usize) -> Vec<usize> {
        self.seen_before(step + 1)
    }

    pub fn all_categories(&self) -> Vec<usize> {
        self.seen_before(self.steps.len())
    }
}

/// Named incremental scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OneStep,
    TwoStep,
    FourStep,
    Reversed,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::OneStep => "one_step",
            Protocol::TwoStep => "two_step",
            Protocol::FourStep => "four_step",
            Protocol::Reversed => "reversed",
        }
    }
}

impl core::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_step" => Ok(Protocol::OneStep),
            "two_step" => Ok(Protocol::TwoStep),
            "four_step" => Ok(Protocol::FourStep),
            "reversed" => Ok(Protocol::Reversed),
            other => Err(Error::Protocol(format!(
                "unknown protocol '{other}' (expected one_step, two_step, four_step or reversed)"
            ))),
        }
    }
}

/// Builds the split for `protocol` over categories `0..num_categories`.
///
/// The base step holds `round(base_fraction * num_categories)` categories.
/// `one_step` with a fraction of exactly 1 degenerates to a single joint step.
pub fn make_protocol(protocol: Protocol, base_fraction: f64, num_categories: usize) -> Result<TaskSplit> {
    if !(base_fraction > 0.0 && base_fraction <= 1.0) {
        return Err(Error::Protocol(format!("base_fraction {base_fraction} must lie in (0, 1]")));
    }
    let base = math::round(base_fraction * num_categories as f64) as usize;
    if protocol == Protocol::OneStep && base == num_categories && base_fraction == 1.0 {
        return TaskSplit::new(vec![(0..num_categories).collect()]);
    }
    if base == 0 || base >= num_categories {
        return Err(Error::Protocol(format!(
            "base_fraction {base_fraction} of {num_categories} categories leaves an empty step"
        )));
    }
    let increments = match protocol {
        Protocol::OneStep | Protocol::Reversed => 1,
        Protocol::TwoStep => 2,
        Protocol::FourStep => 4,
    };
    let rest = num_categories - base;
    if rest < increments {
        return Err(Error::Protocol(format!(
            "{rest} remaining categories cannot fill {increments} incremental steps"
        )));
    }
    if protocol == Protocol::Reversed {
        let cut = num_categories - base;
        return TaskSplit::new(vec![(cut..num_categories).collect(), (0..cut).collect()]);
    }
    let mut steps = vec![(0..base).collect::<Vec<_>>()];
    let mut start = base;
    for i in 0..increments {
        let len = rest / increments + usize::from(i < rest % increments);
        steps.push((start..start + len).collect());
        start += len;
    }
    TaskSplit::new(steps)
}

/// One image of a view with the annotations visible in that view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewItem {
    pub image_index: usize,
    pub annotations: Vec<Annotation>,
}

/// Immutable subset of a partition restricted to some categories.
#[derive(Debug, Clone, PartialEq)]
pub struct StepView {
    pub categories: Vec<usize>,
    pub items: Vec<ViewItem>,
}

impl StepView {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.items.iter().map(|i| i.annotations.len()).sum()
    }
}

/// Restricts `scenes` to `categories`. Annotations of other categories are
/// removed; images left without annotations are dropped unless `keep_empty`.
pub fn view_for_categories(scenes: &[Scene], categories: &[usize], keep_empty: bool) -> StepView {
    let wanted: BTreeSet<usize> = categories.iter().copied().collect();
    let items = scenes
        .iter()
        .enumerate()
        .filter_map(|(image_index, scene)| {
            let annotations: Vec<Annotation> =
                scene.annotations.iter().filter(|a| wanted.contains(&a.category_id)).copied().collect();
            (keep_empty || !annotations.is_empty()).then_some(ViewItem { image_index, annotations })
        })
        .collect();
    StepView { categories: wanted.into_iter().collect(), items }
}

/// Training view for one incremental step: only images with at least one
/// object of the step's categories, carrying only those annotations.
pub fn filter_by_step(scenes: &[Scene], split: &TaskSplit, step_index: usize) -> Result<StepView> {
    let categories = split.step(step_index)?;
    let view = view_for_categories(scenes, categories, false);
    if view.is_empty() {
        return Err(Error::EmptyStep { step: step_index });
    }
    Ok(view)
}

/// Renders a split as one line per step of space-separated category ids.
pub fn split_to_text(split: &TaskSplit) -> String {
    let mut out = String::new();
    for step in split.steps() {
        let line: Vec<String> = step.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn split_from_text(text: &str) -> Result<TaskSplit> {
    let mut steps = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|tok| tok.parse::<usize>().map_err(|_| Error::Protocol(format!("bad category id '{tok}'"))))
            .collect::<Result<Vec<_>>>()?;
        steps.push(ids);
    }
    TaskSplit::new(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec { image_size: 64, min_box_side: 12, seed, ..SceneSpec::default() }
    }

    #[test]
    fn protocols_match_expected_partitions() {
        let one = make_protocol(Protocol::OneStep, 0.5, 16).unwrap();
        assert_eq!(one.steps(), [(0..8).collect::<Vec<_>>(), (8..16).collect()]);

        let four = make_protocol(Protocol::FourStep, 0.5, 16).unwrap();
        assert_eq!(four.steps(), [vec![0, 1, 2, 3, 4, 5, 6, 7], vec![8, 9], vec![10, 11], vec![12, 13], vec![14, 15]]);

        let rev = make_protocol(Protocol::Reversed, 0.5, 16).unwrap();
        assert_eq!(rev.steps(), [(8..16).collect::<Vec<_>>(), (0..8).collect()]);

        let two = make_protocol(Protocol::TwoStep, 0.5, 16).unwrap();
        assert_eq!(two.len(), 3);
        assert_eq!(two.all_categories(), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn one_step_full_fraction_is_a_single_joint_step() {
        let split = make_protocol(Protocol::OneStep, 1.0, 16).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.step(0).unwrap().len(), 16);
    }

    #[test]
    fn fraction_leaving_empty_step_is_rejected() {
        assert!(make_protocol(Protocol::OneStep, 0.01, 16).is_err());
        assert!(make_protocol(Protocol::FourStep, 0.9, 16).is_err());
        assert!(make_protocol(Protocol::OneStep, 0.0, 16).is_err());
    }

    #[test]
    fn overlapping_steps_are_rejected() {
        assert!(TaskSplit::new(vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(TaskSplit::new(vec![]).is_err());
    }

    #[test]
    fn spec_validation_names_the_constraint() {
        let spec = SceneSpec { image_size: 40, min_box_side: 12, ..SceneSpec::default() };
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, Error::InvalidSceneSpec(ref m) if m.contains("min_box_side")));
        let spec = SceneSpec { num_categories: 1, ..SceneSpec::default() };
        assert!(spec.validate().is_err());
        let spec = SceneSpec { objects_per_image: (3, 2), ..SceneSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn crowded_spec_fails_generation() {
        let spec = SceneSpec { image_size: 48, min_box_side: 12, objects_per_image: (40, 40), ..SceneSpec::default() };
        assert!(matches!(generate_dataset(&spec, 2, 2), Err(Error::Generation(_))));
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_dataset(&small_spec(7), 20, 20).unwrap();
        let b = generate_dataset(&small_spec(7), 20, 20).unwrap();
        let c = generate_dataset(&small_spec(8), 20, 20).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train[0].annotations, c.train[0].annotations);
    }

    #[test]
    fn annotations_respect_invariants() {
        let spec = small_spec(3);
        let data = generate_dataset(&spec, 40, 20).unwrap();
        for scene in data.train.iter().chain(&data.test) {
            assert!(!scene.annotations.is_empty());
            for a in &scene.annotations {
                let b = a.bbox;
                assert!(b.x_min < b.x_max && b.y_min < b.y_max);
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                assert!(b.x_max <= spec.image_size as f64 && b.y_max <= spec.image_size as f64);
                assert!(b.width() >= spec.min_box_side as f64 && b.height() >= spec.min_box_side as f64);
                assert!(a.category_id < spec.num_categories);
            }
            for (i, a) in scene.annotations.iter().enumerate() {
                for b in &scene.annotations[i + 1..] {
                    assert!(a.bbox.iou(&b.bbox) <= MAX_PAIR_IOU);
                }
            }
        }
    }

    #[test]
    fn step_view_keeps_only_step_categories() {
        let data = generate_dataset(&small_spec(1), 60, 20).unwrap();
        let split = make_protocol(Protocol::OneStep, 0.5, 16).unwrap();
        let view = filter_by_step(&data.train, &split, 1).unwrap();
        assert!(view.items.iter().flat_map(|i| &i.annotations).all(|a| a.category_id >= 8));

        let identity = TaskSplit::new(vec![(0..16).collect()]).unwrap();
        let all = filter_by_step(&data.train, &identity, 0).unwrap();
        assert_eq!(all.annotation_count(), Dataset::annotation_count(&data.train));

        assert!(matches!(filter_by_step(&data.train, &split, 2), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn step_view_count_matches_brute_force_scan() {
        let data = generate_dataset(&small_spec(5), 80, 20).unwrap();
        let split = TaskSplit::new(vec![(0..4).collect(), (4..8).collect(), (8..12).collect(), (12..16).collect()])
            .unwrap();
        let view = filter_by_step(&data.train, &split, 2).unwrap();
        let mut brute = 0;
        for scene in &data.train {
            let mut hit = false;
            for a in &scene.annotations {
                if (8..=11).contains(&a.category_id) {
                    hit = true;
                }
            }
            if hit {
                brute += 1;
            }
        }
        assert_eq!(view.len(), brute);
    }

    #[test]
    fn empty_step_is_an_error() {
        let data = generate_dataset(&small_spec(2), 16, 16).unwrap();
        let split = TaskSplit::new(vec![vec![0], vec![30]]).unwrap();
        assert_eq!(filter_by_step(&data.train, &split, 1), Err(Error::EmptyStep { step: 1 }));
    }

    #[test]
    fn split_text_roundtrip() {
        let split = make_protocol(Protocol::FourStep, 0.5, 16).unwrap();
        assert_eq!(split_from_text(&split_to_text(&split)).unwrap(), split);
    }
}
