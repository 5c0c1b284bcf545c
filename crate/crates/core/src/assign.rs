//! Label assignment: which locations regress which ground-truth box.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::detector::{HeadConfig, EDGES};
use crate::geometry::BoxF;
use crate::scene::Annotation;

/// A positive location's target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub category: usize,
    /// Edge distances in stride units, [`EDGES`] order, each in `[0, n-1]`.
    pub edges: [f64; 4],
    pub bbox: BoxF,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAssignment {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    /// `None` marks background.
    pub targets: Vec<Option<Target>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub levels: Vec<LevelAssignment>,
}

impl Assignment {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.targets.iter().filter(|t| t.is_some()).count()).sum()
    }
}

fn box_order(a: &Annotation, b: &Annotation) -> Ordering {
    let key = |x: &Annotation| [x.bbox.area(), x.bbox.x_min, x.bbox.y_min, x.bbox.x_max, x.bbox.y_max, x.category_id as f64];
    let (ka, kb) = (key(a), key(b));
    ka.iter().zip(&kb).map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Assigns every location of every level.
///
/// A location is positive iff its center lies in the central 50% of a box
/// (half the width and half the height, closed) and all four edge distances
/// of that box fit in `[0, n-1]` stride units. Overlaps go to the smaller
/// box; equal areas fall back to coordinates then category so the result does
/// not depend on annotation order.
pub fn assign_targets(annotations: &[Annotation], config: &HeadConfig, image_size: u32) -> Assignment {
    let max_dist = (config.num_bins - 1) as f64;
    let mut ordered: Vec<&Annotation> = annotations.iter().collect();
    ordered.sort_by(|a, b| box_order(a, b));
    let levels = config
        .pyramid_strides
        .iter()
        .map(|&stride| {
            let side = (image_size / stride) as usize;
            let s = stride as f64;
            let mut targets = vec![None; side * side];
            for (loc, slot) in targets.iter_mut().enumerate() {
                let cx = ((loc % side) as f64 + 0.5) * s;
                let cy = ((loc / side) as f64 + 0.5) * s;
                *slot = ordered.iter().find_map(|ann| {
                    let b = ann.bbox;
                    let (bx, by) = b.center();
                    if (cx - bx).abs() > 0.25 * b.width() || (cy - by).abs() > 0.25 * b.height() {
                        return None;
                    }
                    let edges = [(cx - b.x_min) / s, (cy - b.y_min) / s, (b.x_max - cx) / s, (b.y_max - cy) / s];
                    edges
                        .iter()
                        .all(|&d| (0.0..=max_dist).contains(&d))
                        .then_some(Target { category: ann.category_id, edges, bbox: b })
                });
            }
            LevelAssignment { stride, height: side, width: side, targets }
        })
        .collect();
    debug_assert_eq!(EDGES.len(), 4);
    Assignment { levels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> HeadConfig {
        HeadConfig { num_categories_total: 4, num_bins: 8, pyramid_strides: vec![8, 16], channels: 8 }
    }

    #[test]
    fn empty_annotations_assign_nothing() {
        assert_eq!(assign_targets(&[], &cfg(), 64).num_positives(), 0);
    }

    #[test]
    fn centered_box_matches_brute_force_geometry() {
        // Location (2, 2) at stride 8 has center (20, 20).
        let ann = Annotation { category_id: 1, bbox: BoxF::new(4.0, 8.0, 36.0, 32.0) };
        let a = assign_targets(&[ann], &cfg(), 64);
        let lvl = &a.levels[0];
        for (loc, t) in lvl.targets.iter().enumerate() {
            let cx = ((loc % 8) as f64 + 0.5) * 8.0;
            let cy = ((loc / 8) as f64 + 0.5) * 8.0;
            let inside = (cx - 20.0).abs() <= 8.0 && (cy - 20.0).abs() <= 6.0;
            let edges = [(cx - 4.0) / 8.0, (cy - 8.0) / 8.0, (36.0 - cx) / 8.0, (32.0 - cy) / 8.0];
            let fits = edges.iter().all(|&d| (0.0..=7.0).contains(&d));
            assert_eq!(t.is_some(), inside && fits, "loc {loc}");
            if let Some(t) = t {
                assert_eq!(t.edges, edges);
                assert_eq!(t.category, 1);
            }
        }
        let center = lvl.targets[2 * 8 + 2].unwrap();
        assert_eq!(center.edges, [2.0, 1.5, 2.0, 1.5]);
    }

    #[test]
    fn nested_boxes_go_to_the_smaller_one() {
        let big = Annotation { category_id: 0, bbox: BoxF::new(0.0, 0.0, 40.0, 40.0) };
        let small = Annotation { category_id: 3, bbox: BoxF::new(12.0, 12.0, 28.0, 28.0) };
        for anns in [[big, small], [small, big]] {
            let a = assign_targets(&anns, &cfg(), 64);
            assert_eq!(a.levels[0].targets[2 * 8 + 2].unwrap().category, 3);
        }
    }

    #[test]
    fn oversized_edges_do_not_assign() {
        // 120 px box: edges of 7.5 stride units at stride 8 exceed n - 1 = 7.
        let ann = Annotation { category_id: 0, bbox: BoxF::new(0.0, 0.0, 120.0, 120.0) };
        let a = assign_targets(&[ann], &cfg(), 128);
        assert!(a.levels[0].targets.iter().all(Option::is_none));
        assert!(a.levels[1].targets.iter().any(Option::is_some));
    }
}
