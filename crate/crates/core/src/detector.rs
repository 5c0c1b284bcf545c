//! Miniature anchor-free detector with a distributional box head.
//!
//! Backbone: four stride-2 3x3 conv stages (strides 2, 4, 8, 16). The stage
//! outputs at the configured pyramid strides go through 1x1 laterals and a
//! nearest-neighbour top-down pathway. A head shared across levels has one
//! 3x3 tower per branch followed by a 3x3 output conv: `K` classification
//! logits and `4 x n` edge-bin logits per location.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BoxF;
use crate::nn::{self, Conv2d, ConvCache, FeatureMap, ParamLayout};
use crate::scene::RgbImage;
use crate::{math, Error, Result};

/// Box edges in the order used by every `4 x n` regression block.
pub const EDGES: [Edge; 4] = [Edge::Left, Edge::Top, Edge::Right, Edge::Bottom];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Left,
    Top,
    Right,
    Bottom,
}

const STAGE_STRIDES: [u32; 4] = [2, 4, 8, 16];
const PRIOR_PROB: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Classification channels for every category of every step.
    pub num_categories_total: usize,
    /// Bins per box edge.
    pub num_bins: usize,
    pub pyramid_strides: Vec<u32>,
    pub channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { num_categories_total: 16, num_bins: 8, pyramid_strides: vec![8, 16], channels: 64 }
    }
}

impl HeadConfig {
    pub fn validate(&self, image_size: u32) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.num_bins < 2 {
            return bad(format!("num_bins {} must be at least 2", self.num_bins));
        }
        if self.num_categories_total == 0 {
            return bad("num_categories_total must be positive".into());
        }
        if self.channels < 4 {
            return bad(format!("channels {} must be at least 4", self.channels));
        }
        if self.pyramid_strides.is_empty() {
            return bad("at least one pyramid stride is required".into());
        }
        for (i, &s) in self.pyramid_strides.iter().enumerate() {
            if !STAGE_STRIDES.contains(&s) {
                return bad(format!("stride {s} is not one of {STAGE_STRIDES:?}"));
            }
            if i > 0 && s != 2 * self.pyramid_strides[i - 1] {
                return bad(format!("strides must increase by factors of 2, got {:?}", self.pyramid_strides));
            }
            if image_size % s != 0 {
                return bad(format!("stride {s} does not divide image size {image_size}"));
            }
        }
        Ok(())
    }
}

/// Head outputs of one pyramid level, location-major (`loc = y * width + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelResponse {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
    /// `[locations, num_categories]` raw classification logits.
    pub cls: Vec<f64>,
    /// `[locations, 4, num_bins]` raw edge-bin logits in [`EDGES`] order.
    pub reg: Vec<f64>,
}

impl LevelResponse {
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// Pixel coordinates of a location's center.
    pub fn center(&self, loc: usize) -> (f64, f64) {
        let s = self.stride as f64;
        (((loc % self.width) as f64 + 0.5) * s, ((loc / self.width) as f64 + 0.5) * s)
    }
}

/// Classification logits and box-bin logits for every level of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub num_categories: usize,
    pub num_bins: usize,
    pub levels: Vec<LevelResponse>,
}

impl ResponseSet {
    pub fn zeros_like(other: &ResponseSet) -> Self {
        let levels = other
            .levels
            .iter()
            .map(|l| LevelResponse {
                stride: l.stride,
                height: l.height,
                width: l.width,
                cls: vec![0.0; l.cls.len()],
                reg: vec![0.0; l.reg.len()],
            })
            .collect();
        Self { num_categories: other.num_categories, num_bins: other.num_bins, levels }
    }

    pub fn location_count(&self) -> usize {
        self.levels.iter().map(LevelResponse::locations).sum()
    }

    pub fn cls_at(&self, level: usize, loc: usize) -> &[f64] {
        let k = self.num_categories;
        &self.levels[level].cls[loc * k..(loc + 1) * k]
    }

    /// Bin logits of one edge at one location.
    pub fn edge_at(&self, level: usize, loc: usize, edge: usize) -> &[f64] {
        let n = self.num_bins;
        let start = (loc * 4 + edge) * n;
        &self.levels[level].reg[start..start + n]
    }

    pub fn same_shape(&self, other: &ResponseSet) -> bool {
        self.num_categories == other.num_categories
            && self.num_bins == other.num_bins
            && self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| {
                a.stride == b.stride && a.height == b.height && a.width == b.width
            })
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.cls.iter().chain(&l.reg).all(|v| v.is_finite()))
    }

    /// Expected edge distances (in stride units) at a location.
    pub fn expected_edges(&self, level: usize, loc: usize) -> [f64; 4] {
        let mut out = [0.0; 4];
        let mut probs = vec![0.0; self.num_bins];
        for (e, o) in out.iter_mut().enumerate() {
            math::softmax_into(self.edge_at(level, loc, e), 1.0, &mut probs);
            *o = probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        }
        out
    }

    /// Box decoded from the expected edge distances at a location.
    pub fn decoded_box(&self, level: usize, loc: usize) -> BoxF {
        let lvl = &self.levels[level];
        let (cx, cy) = lvl.center(loc);
        let s = lvl.stride as f64;
        let [l, t, r, b] = self.expected_edges(level, loc);
        BoxF::new(cx - l * s, cy - t * s, cx + r * s, cy + b * s)
    }
}

/// Normalizes an RGB image into a `[3, H, W]` network input.
pub fn image_to_input(image: &RgbImage) -> FeatureMap {
    let (w, h) = (image.width as usize, image.height as usize);
    let mut x = FeatureMap::zeros(3, h, w);
    for (i, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            x.data[c * h * w + i] = (px[c] as f32 / 255.0 - 0.5) / 0.25;
        }
    }
    x
}

/// Architecture of the detector; parameters are passed alongside as a slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDet {
    config: HeadConfig,
    image_size: u32,
    layout: ParamLayout,
    stages: Vec<Conv2d>,
    level_stage: Vec<usize>,
    laterals: Vec<Conv2d>,
    cls_tower: Conv2d,
    reg_tower: Conv2d,
    cls_out: Conv2d,
    reg_out: Conv2d,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stage_out: Vec<FeatureMap>,
    stage_cache: Vec<ConvCache>,
    lateral_cache: Vec<ConvCache>,
    heads: Vec<HeadCache>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    cls_tower_out: FeatureMap,
    cls_tower_cache: ConvCache,
    cls_out_cache: ConvCache,
    reg_tower_out: FeatureMap,
    reg_tower_cache: ConvCache,
    reg_out_cache: ConvCache,
}

/// Component activations used by feature-distance analysis.
#[derive(Debug, Clone)]
pub struct Activations {
    pub pyramid: Vec<FeatureMap>,
    pub responses: ResponseSet,
}

impl TinyDet {
    pub fn new(config: HeadConfig, image_size: u32) -> Result<Self> {
        config.validate(image_size)?;
        let c = config.channels;
        let widths = [(c / 4).max(4), (c / 2).max(4), c, c];
        let level_stage: Vec<usize> = config
            .pyramid_strides
            .iter()
            .map(|s| STAGE_STRIDES.iter().position(|x| x == s).expect("validated stride"))
            .collect();
        let depth = level_stage.iter().max().copied().unwrap_or(0) + 1;
        let mut layout = ParamLayout::default();
        let mut stages = Vec::with_capacity(depth);
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate().take(depth) {
            stages.push(Conv2d::register(&mut layout, &format!("backbone.stage{i}"), in_ch, w, 3, 2));
            in_ch = w;
        }
        let laterals = level_stage
            .iter()
            .enumerate()
            .map(|(l, &s)| Conv2d::register(&mut layout, &format!("pyramid.lateral{l}"), widths[s], c, 1, 1))
            .collect();
        let cls_tower = Conv2d::register(&mut layout, "head.cls_tower", c, c, 3, 1);
        let reg_tower = Conv2d::register(&mut layout, "head.reg_tower", c, c, 3, 1);
        let cls_out = Conv2d::register(&mut layout, "head.cls_out", c, config.num_categories_total, 3, 1);
        let reg_out = Conv2d::register(&mut layout, "head.reg_out", c, 4 * config.num_bins, 3, 1);
        Ok(Self { config, image_size, layout, stages, level_stage, laterals, cls_tower, reg_tower, cls_out, reg_out })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn image_size(&self) -> u32 {
        self.image_size
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Fresh parameters: He-uniform trunk, near-zero output convs, and a
    /// classification bias at the rare-foreground prior.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; self.layout.total];
        let mut fill = |conv: &Conv2d, bound: f64, bias: f32, params: &mut [f32]| {
            for w in &mut params[conv.weight..conv.weight + conv.weight_len()] {
                *w = rng.gen_range(-bound..bound) as f32;
            }
            params[conv.bias..conv.bias + conv.out_ch].fill(bias);
        };
        for conv in self.stages.iter().chain([&self.cls_tower, &self.reg_tower]) {
            fill(conv, math::sqrt(6.0 / conv.fan_in() as f64), 0.0, &mut params);
        }
        for conv in &self.laterals {
            fill(conv, math::sqrt(3.0 / conv.fan_in() as f64), 0.0, &mut params);
        }
        let prior_bias = -math::ln((1.0 - PRIOR_PROB) / PRIOR_PROB) as f32;
        fill(&self.cls_out, 0.01 * math::sqrt(3.0), prior_bias, &mut params);
        fill(&self.reg_out, 0.01 * math::sqrt(3.0), 0.0, &mut params);
        params
    }

    fn check(&self, params: &[f32], image: &RgbImage) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.layout.total, params.len())));
        }
        if image.width != self.image_size || image.height != self.image_size {
            return Err(Error::Shape(format!(
                "image is {}x{}, detector expects {}x{}",
                image.width, image.height, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Level grid sizes `(height, width)` for this configuration.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.config
            .pyramid_strides
            .iter()
            .map(|&s| ((self.image_size / s) as usize, (self.image_size / s) as usize))
            .collect()
    }

    pub fn forward(&self, params: &[f32], image: &RgbImage) -> Result<ResponseSet> {
        Ok(self.forward_train(params, image)?.0)
    }

    pub fn activations(&self, params: &[f32], image: &RgbImage) -> Result<Activations> {
        self.check(params, image)?;
        let (pyramid, _, _, _) = self.trunk(params, &image_to_input(image));
        let (responses, _) = self.heads(params, &pyramid);
        Ok(Activations { pyramid, responses })
    }

    pub fn forward_train(&self, params: &[f32], image: &RgbImage) -> Result<(ResponseSet, ForwardCache)> {
        self.check(params, image)?;
        let (pyramid, stage_out, stage_cache, lateral_cache) = self.trunk(params, &image_to_input(image));
        let (responses, heads) = self.heads(params, &pyramid);
        Ok((responses, ForwardCache { stage_out, stage_cache, lateral_cache, heads }))
    }

    #[allow(clippy::type_complexity)]
    fn trunk(&self, params: &[f32], input: &FeatureMap) -> (Vec<FeatureMap>, Vec<FeatureMap>, Vec<ConvCache>, Vec<ConvCache>) {
        let mut stage_out: Vec<FeatureMap> = Vec::with_capacity(self.stages.len());
        let mut stage_cache = Vec::with_capacity(self.stages.len());
        for (i, conv) in self.stages.iter().enumerate() {
            let x = if i == 0 { input } else { &stage_out[i - 1] };
            let (mut y, cache) = conv.forward(params, x);
            nn::relu_inplace(&mut y);
            stage_out.push(y);
            stage_cache.push(cache);
        }
        let mut pyramid = Vec::with_capacity(self.laterals.len());
        let mut lateral_cache = Vec::with_capacity(self.laterals.len());
        for (conv, &s) in self.laterals.iter().zip(&self.level_stage) {
            let (y, cache) = conv.forward(params, &stage_out[s]);
            pyramid.push(y);
            lateral_cache.push(cache);
        }
        for l in (0..pyramid.len().saturating_sub(1)).rev() {
            let (low, high) = pyramid.split_at_mut(l + 1);
            nn::add_upsampled_2x(&mut low[l], &high[0]);
        }
        (pyramid, stage_out, stage_cache, lateral_cache)
    }

    fn heads(&self, params: &[f32], pyramid: &[FeatureMap]) -> (ResponseSet, Vec<HeadCache>) {
        let k = self.config.num_categories_total;
        let n = self.config.num_bins;
        let mut levels = Vec::with_capacity(pyramid.len());
        let mut caches = Vec::with_capacity(pyramid.len());
        for (p, &stride) in pyramid.iter().zip(&self.config.pyramid_strides) {
            let (mut cls_tower_out, cls_tower_cache) = self.cls_tower.forward(params, p);
            nn::relu_inplace(&mut cls_tower_out);
            let (cls_map, cls_out_cache) = self.cls_out.forward(params, &cls_tower_out);
            let (mut reg_tower_out, reg_tower_cache) = self.reg_tower.forward(params, p);
            nn::relu_inplace(&mut reg_tower_out);
            let (reg_map, reg_out_cache) = self.reg_out.forward(params, &reg_tower_out);
            levels.push(LevelResponse {
                stride,
                height: p.height,
                width: p.width,
                cls: to_location_major(&cls_map, k),
                reg: to_location_major(&reg_map, 4 * n),
            });
            caches.push(HeadCache {
                cls_tower_out,
                cls_tower_cache,
                cls_out_cache,
                reg_tower_out,
                reg_tower_cache,
                reg_out_cache,
            });
        }
        (ResponseSet { num_categories: k, num_bins: n, levels }, caches)
    }

    /// Backpropagates `d_responses` (same shape as the forward output) and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(&self, params: &[f32], cache: &ForwardCache, d_responses: &ResponseSet, grads: &mut [f32]) {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer size");
        let k = self.config.num_categories_total;
        let n = self.config.num_bins;
        let c = self.config.channels;
        let mut d_pyramid: Vec<FeatureMap> = Vec::with_capacity(cache.heads.len());
        for (head, level) in cache.heads.iter().zip(&d_responses.levels) {
            let (h, w) = (level.height, level.width);
            let d_cls = to_channel_major(&level.cls, k, h, w);
            let mut d_ct = self.cls_out.backward(params, &head.cls_out_cache, &d_cls, grads, true).expect("input grad");
            nn::relu_backward(&head.cls_tower_out, &mut d_ct);
            let mut d_p = self.cls_tower.backward(params, &head.cls_tower_cache, &d_ct, grads, true).expect("input grad");
            let d_reg = to_channel_major(&level.reg, 4 * n, h, w);
            let mut d_rt = self.reg_out.backward(params, &head.reg_out_cache, &d_reg, grads, true).expect("input grad");
            nn::relu_backward(&head.reg_tower_out, &mut d_rt);
            let d_p2 = self.reg_tower.backward(params, &head.reg_tower_cache, &d_rt, grads, true).expect("input grad");
            for (a, b) in d_p.data.iter_mut().zip(&d_p2.data) {
                *a += b;
            }
            debug_assert_eq!(d_p.channels, c);
            d_pyramid.push(d_p);
        }
        for l in 0..d_pyramid.len().saturating_sub(1) {
            let (low, high) = d_pyramid.split_at_mut(l + 1);
            nn::add_downsampled_sum_2x(&mut high[0], &low[l]);
        }
        let mut d_stage: Vec<Option<FeatureMap>> = vec![None; self.stages.len()];
        for ((conv, lcache), (d_p, &s)) in
            self.laterals.iter().zip(&cache.lateral_cache).zip(d_pyramid.iter().zip(&self.level_stage))
        {
            let d = conv.backward(params, lcache, d_p, grads, true).expect("input grad");
            accumulate(&mut d_stage[s], d);
        }
        for i in (0..self.stages.len()).rev() {
            let Some(mut d) = d_stage[i].take() else { continue };
            nn::relu_backward(&cache.stage_out[i], &mut d);
            if let Some(d_in) = self.stages[i].backward(params, &cache.stage_cache[i], &d, grads, i > 0) {
                accumulate(&mut d_stage[i - 1], d_in);
            }
        }
    }
}

fn accumulate(slot: &mut Option<FeatureMap>, value: FeatureMap) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&value.data) {
                *a += b;
            }
        }
        None => *slot = Some(value),
    }
}

fn to_location_major(map: &FeatureMap, per_loc: usize) -> Vec<f64> {
    let plane = map.plane();
    let mut out = vec![0.0f64; plane * per_loc];
    for ch in 0..per_loc {
        for loc in 0..plane {
            out[loc * per_loc + ch] = map.data[ch * plane + loc] as f64;
        }
    }
    out
}

fn to_channel_major(values: &[f64], per_loc: usize, h: usize, w: usize) -> FeatureMap {
    let mut map = FeatureMap::zeros(per_loc, h, w);
    let plane = h * w;
    for loc in 0..plane {
        for ch in 0..per_loc {
            map.data[ch * plane + loc] = values[loc * per_loc + ch] as f32;
        }
    }
    map
}
