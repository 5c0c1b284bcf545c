//! Minimal convolutional building blocks with explicit backward passes.
//!
//! Parameters live in one flat `f32` vector described by a [`ParamLayout`];
//! layers hold offsets into it, so optimizers and snapshots treat the whole
//! model as a single slice.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Channel-major activation tensor `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let spec = ParamSpec { name, shape, offset };
        self.total += spec.len();
        self.specs.push(spec);
        offset
    }
}

/// `C = beta * C + A * B` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution with square kernel, zero padding and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: usize,
    pub bias: usize,
}

/// Saved state of a convolution call needed by its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn register(layout: &mut ParamLayout, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let weight = layout.push(alloc::format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel]);
        let bias = layout.push(alloc::format!("{name}.bias"), vec![out_ch]);
        Self { in_ch, out_ch, kernel, stride, pad: kernel / 2, weight, bias }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.fan_in()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f32> {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plane = oh * ow;
        let mut cols = vec![0.0f32; self.fan_in() * plane];
        for c in 0..self.in_ch {
            let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], in_h: usize, in_w: usize, oh: usize, ow: usize) -> FeatureMap {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plane = oh * ow;
        let mut dx = FeatureMap::zeros(self.in_ch, in_h, in_w);
        for c in 0..self.in_ch {
            let dst = &mut dx.data[c * in_h * in_w..(c + 1) * in_h * in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < in_w as isize {
                                dst[iy as usize * in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let mut out = FeatureMap::zeros(self.out_ch, oh, ow);
        let plane = oh * ow;
        for (o, chunk) in out.data.chunks_mut(plane).enumerate() {
            chunk.fill(params[self.bias + o]);
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        gemm(self.out_ch, self.fan_in(), plane, w, false, &cols, false, &mut out.data, 1.0);
        (out, ConvCache { cols, in_h: x.height, in_w: x.width })
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvCache,
        d_out: &FeatureMap,
        grads: &mut [f32],
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let plane = d_out.plane();
        let fan_in = self.fan_in();
        for (o, chunk) in d_out.data.chunks(plane).enumerate() {
            grads[self.bias + o] += chunk.iter().sum::<f32>();
        }
        let dw = &mut grads[self.weight..self.weight + self.weight_len()];
        gemm(self.out_ch, plane, fan_in, &d_out.data, false, &cache.cols, true, dw, 1.0);
        if !need_input_grad {
            return None;
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        let mut dcols = vec![0.0f32; fan_in * plane];
        gemm(fan_in, self.out_ch, plane, w, true, &d_out.data, false, &mut dcols, 0.0);
        Some(self.col2im(&dcols, cache.in_h, cache.in_w, d_out.height, d_out.width))
    }
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
}

/// Masks `grad` by the positive support of a ReLU output.
pub fn relu_backward(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `dst += nearest_upsample_2x(src)`.
pub fn add_upsampled_2x(dst: &mut FeatureMap, src: &FeatureMap) {
    assert_eq!(dst.channels, src.channels);
    assert_eq!((dst.height, dst.width), (src.height * 2, src.width * 2));
    for c in 0..dst.channels {
        for y in 0..dst.height {
            for x in 0..dst.width {
                dst.data[(c * dst.height + y) * dst.width + x] += src.data[(c * src.height + y / 2) * src.width + x / 2];
            }
        }
    }
}

/// Adjoint of nearest 2x upsampling: sums each 2x2 block of `grad` into `dst`.
pub fn add_downsampled_sum_2x(dst: &mut FeatureMap, grad: &FeatureMap) {
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                dst.data[(c * dst.height + y / 2) * dst.width + x / 2] += grad.data[(c * grad.height + y) * grad.width + x];
            }
        }
    }
}
