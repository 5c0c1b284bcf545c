//! On-disk dataset layout.
//!
//! ```text
//! <dir>/scene_spec.json
//! <dir>/train/000000.png ...
//! <dir>/train/annotations.txt
//! <dir>/test/...
//! ```
//!
//! Annotation files start with `# synthshapes v1` followed by one
//! `image_name category_id x_min y_min x_max y_max` record per object.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use erd_core::geometry::BoxF;
use erd_core::scene::{Annotation, Dataset, Partition, RgbImage, Scene, SceneSpec, TaskSplit};

use crate::error::{format_err, io_err, Result};

pub const ANNOTATION_HEADER: &str = "# synthshapes v1";
pub const SPEC_FILE: &str = "scene_spec.json";
pub const ANNOTATION_FILE: &str = "annotations.txt";

pub fn image_name(index: usize) -> String {
    format!("{index:06}.png")
}

pub fn annotations_to_text(scenes: &[Scene]) -> String {
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for (i, scene) in scenes.iter().enumerate() {
        for a in &scene.annotations {
            let b = a.bbox;
            writeln!(out, "{} {} {} {} {} {}", image_name(i), a.category_id, b.x_min, b.y_min, b.x_max, b.y_max)
                .unwrap();
        }
    }
    out
}

/// Parses an annotation file into per-image annotation lists.
pub fn annotations_from_text(text: &str, num_images: usize, path: &Path) -> Result<Vec<Vec<Annotation>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(ANNOTATION_HEADER) {
        return Err(format_err(path, format!("missing '{ANNOTATION_HEADER}' header")));
    }
    let mut out = vec![Vec::new(); num_images];
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| format_err(path, format!("line {}: {m}", n + 2));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let index: usize = fields[0]
            .strip_suffix(".png")
            .and_then(|s| s.parse().ok())
            .filter(|&i| i < num_images)
            .ok_or_else(|| bad("unknown image name"))?;
        let category_id = fields[1].parse().map_err(|_| bad("bad category id"))?;
        let mut c = [0.0f64; 4];
        for (v, f) in c.iter_mut().zip(&fields[2..]) {
            *v = f.parse().map_err(|_| bad("bad coordinate"))?;
        }
        out[index].push(Annotation { category_id, bbox: BoxF::new(c[0], c[1], c[2], c[3]) });
    }
    Ok(out)
}

fn write_partition(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, scene) in scenes.iter().enumerate() {
        let path = dir.join(image_name(i));
        let img = &scene.image;
        image::save_buffer(&path, &img.data, img.width, img.height, image::ExtendedColorType::Rgb8)
            .map_err(|e| format_err(&path, e.to_string()))?;
    }
    let path = dir.join(ANNOTATION_FILE);
    fs::write(&path, annotations_to_text(scenes)).map_err(io_err(&path))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec_path = dir.join(SPEC_FILE);
    let spec = serde_json::to_string_pretty(&dataset.spec).expect("spec serializes");
    fs::write(&spec_path, spec + "\n").map_err(io_err(&spec_path))?;
    write_partition(&dir.join(Partition::Train.name()), &dataset.train)?;
    write_partition(&dir.join(Partition::Test.name()), &dataset.test)
}

fn read_partition(dir: &Path) -> Result<Vec<Scene>> {
    let mut images = Vec::new();
    loop {
        let path = dir.join(image_name(images.len()));
        if !path.exists() {
            break;
        }
        let img = image::open(&path).map_err(|e| format_err(&path, e.to_string()))?.to_rgb8();
        images.push(RgbImage { width: img.width(), height: img.height(), data: img.into_raw() });
    }
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let annotations = annotations_from_text(&text, images.len(), &path)?;
    Ok(images.into_iter().zip(annotations).map(|(image, annotations)| Scene { image, annotations }).collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&spec_path).map_err(io_err(&spec_path))?;
    let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| format_err(&spec_path, e.to_string()))?;
    let train = read_partition(&dir.join(Partition::Train.name()))?;
    let test = read_partition(&dir.join(Partition::Test.name()))?;
    Ok(Dataset { spec, train, test })
}

pub fn save_split(split: &TaskSplit, path: &Path) -> Result<()> {
    fs::write(path, erd_core::scene::split_to_text(split)).map_err(io_err(path))
}

pub fn load_split(path: &Path) -> Result<TaskSplit> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(erd_core::scene::split_from_text(&text)?)
}
