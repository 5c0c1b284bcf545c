#![allow(dead_code)]

use erd_core::detector::{LevelResponse, ResponseSet};
use erd_core::geometry::BoxF;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random responses with 1-3 levels of random grids; logits ~ N(0, scale²).
pub fn random_responses(rng: &mut ChaCha8Rng, k: usize, n: usize, scale: f64) -> ResponseSet {
    let num_levels = rng.gen_range(1..=3);
    let normal = Normal::new(0.0, scale).unwrap();
    let levels = (0..num_levels)
        .map(|l| {
            let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let stride = 8u32 << l;
            let cls = (0..h * w * k).map(|_| normal.sample(rng)).collect();
            let reg = (0..h * w * 4 * n).map(|_| normal.sample(rng)).collect();
            LevelResponse { stride, height: h, width: w, cls, reg }
        })
        .collect();
    ResponseSet { num_categories: k, num_bins: n, levels }
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoxF {
    let x = rng.gen_range(0.0..extent);
    let y = rng.gen_range(0.0..extent);
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    BoxF::new(x, y, x + w, y + h)
}

/// Repeatedly keeps the best remaining box and discards everything that
/// overlaps it by more than `thr`.
pub fn reference_nms(boxes: &[BoxF], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        remaining.retain(|&j| j != best && boxes[best].iou(&boxes[j]) <= thr);
    }
    keep
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Brute-force statistical threshold: `(above, selected)` per level, with
/// either per-level or pooled statistics and a single-argmax fallback.
pub fn reference_threshold(g: &[Vec<f64>], alpha: f64, per_level: bool) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let groups: Vec<Vec<usize>> =
        if per_level { (0..g.len()).map(|l| vec![l]).collect() } else { vec![(0..g.len()).collect()] };
    let mut above = vec![Vec::new(); g.len()];
    let mut selected = vec![Vec::new(); g.len()];
    for grp in groups {
        let vals: Vec<f64> = grp.iter().flat_map(|&l| g[l].iter().copied()).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        let tau = mu + alpha * sd;
        let mut any = false;
        let mut best = (usize::MAX, usize::MAX, f64::NEG_INFINITY);
        for &l in &grp {
            for (i, &v) in g[l].iter().enumerate() {
                if v >= tau {
                    above[l].push(i);
                    selected[l].push(i);
                    any = true;
                }
                if v > best.2 {
                    best = (l, i, v);
                }
            }
        }
        if !any {
            selected[best.0].push(best.1);
        }
    }
    (above, selected)
}
