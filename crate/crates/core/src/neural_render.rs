//! Lightweight 2D convolutional renderer with hand-written forward and backward passes.
//!
//! Activations are planar `C×H×W` tensors in `f64`; weights are stored as `f32`
//! (the checkpoint type) and widened on use. Every convolution is 3×3 with zero
//! padding 1 and stride 1 or 2. A layer's input is the previous layer's output,
//! optionally nearest-upsampled ×2, concatenated with an earlier layer's output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::RenderError;
use crate::field::sigmoid;
use crate::imaging::ImageRGB;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Builds a planar tensor from a row-major map with `channels` values per pixel.
    pub fn from_interleaved(map: &[f64], width: usize, height: usize, channels: usize) -> Self {
        let mut t = Tensor::zeros(channels, height, width);
        let n = width * height;
        for p in 0..n {
            for c in 0..channels {
                t.data[c * n + p] = map[p * channels + c];
            }
        }
        t
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for p in 0..n {
                out[p * self.channels + c] = self.data[c * n + p];
            }
        }
        out
    }

    fn concat(a: Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = a.data;
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    fn upsample_nearest2(&self) -> Tensor {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = &mut out.data[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                let row = &src[(y / 2) * self.width..(y / 2 + 1) * self.width];
                for (x, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                    *d = row[x / 2];
                }
            }
        }
        out
    }

    /// Adjoint of nearest ×2 upsampling: sums each 2×2 block.
    fn downsample_sum2(&self) -> Tensor {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[c * h * w + (y / 2) * w + x / 2] += src[y * self.width + x];
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub activation: Activation,
    /// Nearest-upsample the previous output ×2 before this layer.
    #[serde(default)]
    pub upsample: bool,
    /// Concatenate this earlier layer's output after the (upsampled) previous output.
    #[serde(default)]
    pub skip_from: Option<usize>,
}

impl LayerSpec {
    fn conv(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        LayerSpec {
            in_ch,
            out_ch,
            stride,
            activation: Activation::LeakyRelu,
            upsample: false,
            skip_from: None,
        }
    }

    fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * 9
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl LayerPlan {
    /// Shallow U-Net with little work at full resolution and most of its depth at
    /// quarter resolution.
    pub fn default_for(input_channels: usize) -> Self {
        let mut layers = vec![
            LayerSpec::conv(input_channels, 16, 1),
            LayerSpec::conv(16, 32, 2),
            LayerSpec::conv(32, 64, 2),
            LayerSpec::conv(64, 64, 1),
            LayerSpec::conv(64, 64, 1),
            LayerSpec::conv(64, 64, 1),
        ];
        layers.push(LayerSpec {
            upsample: true,
            skip_from: Some(1),
            ..LayerSpec::conv(64 + 32, 32, 1)
        });
        layers.push(LayerSpec {
            upsample: true,
            skip_from: Some(0),
            ..LayerSpec::conv(32 + 16, 16, 1)
        });
        layers.push(LayerSpec {
            activation: Activation::Sigmoid,
            ..LayerSpec::conv(16, 3, 1)
        });
        LayerPlan {
            input_channels,
            layers,
        }
    }

    /// Checks channel and resolution bookkeeping; returns the spatial divisor the
    /// input size must respect.
    pub fn validate(&self) -> Result<usize, RenderError> {
        let bad = |m: String| Err(RenderError::BadPlan(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        let mut levels: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut level = 0usize;
        let mut max_level = 0usize;
        let mut prev_ch = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride != 1 && l.stride != 2 {
                return bad(format!("layer {i}: stride {} not in {{1,2}}", l.stride));
            }
            if l.upsample {
                if level == 0 {
                    return bad(format!("layer {i}: upsample above full resolution"));
                }
                level -= 1;
            }
            let mut in_ch = prev_ch;
            if let Some(s) = l.skip_from {
                if s >= i {
                    return bad(format!("layer {i}: skip from later layer {s}"));
                }
                if levels[s] != level {
                    return bad(format!("layer {i}: skip from layer {s} at a different resolution"));
                }
                in_ch += self.layers[s].out_ch;
            }
            if in_ch != l.in_ch {
                return bad(format!("layer {i}: expects {} input channels, gets {in_ch}", l.in_ch));
            }
            if l.stride == 2 {
                level += 1;
                max_level = max_level.max(level);
            }
            levels.push(level);
            prev_ch = l.out_ch;
        }
        let last = self.layers.last().unwrap();
        if level != 0 || last.out_ch != 3 || last.activation != Activation::Sigmoid {
            return bad("plan must end at full resolution with a 3-channel sigmoid layer".into());
        }
        Ok(1 << max_level)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count() + l.out_ch).sum()
    }
}

/// Cached activations from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    outputs: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvRenderer {
    plan: LayerPlan,
    params: Vec<f32>,
    divisor: usize,
}

impl ConvRenderer {
    /// Kaiming-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init(seed: u64, plan: LayerPlan) -> Result<Self, RenderError> {
        let divisor = plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(plan.param_count());
        for l in &plan.layers {
            let std = (2.0 / (l.in_ch * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..l.weight_count()).map(|_| normal.sample(&mut rng) as f32));
            params.extend(std::iter::repeat_n(0.0f32, l.out_ch));
        }
        Ok(ConvRenderer {
            plan,
            params,
            divisor,
        })
    }

    pub fn from_params(plan: LayerPlan, params: Vec<f32>) -> Result<Self, RenderError> {
        let divisor = plan.validate()?;
        if params.len() != plan.param_count() {
            return Err(RenderError::ParamCount {
                expected: plan.param_count(),
                got: params.len(),
            });
        }
        Ok(ConvRenderer {
            plan,
            params,
            divisor,
        })
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn input_channels(&self) -> usize {
        self.plan.input_channels
    }

    pub fn size_divisor(&self) -> usize {
        self.divisor
    }

    /// `(weight offset, bias offset)` of each layer in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.plan
            .layers
            .iter()
            .map(|l| {
                let w = off;
                off += l.weight_count() + l.out_ch;
                (w, w + l.weight_count())
            })
            .collect()
    }

    pub fn check_input(&self, input: &Tensor) -> Result<(), RenderError> {
        if input.channels != self.plan.input_channels {
            return Err(RenderError::ChannelMismatch {
                expected: self.plan.input_channels,
                got: input.channels,
            });
        }
        if input.height == 0
            || input.width == 0
            || !input.height.is_multiple_of(self.divisor)
            || !input.width.is_multiple_of(self.divisor)
        {
            return Err(RenderError::BadSize {
                width: input.width,
                height: input.height,
                divisor: self.divisor,
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardCache, RenderError> {
        self.check_input(input)?;
        let weights: Vec<f64> = self.params.iter().map(|&v| v as f64).collect();
        let offsets = self.layer_offsets();
        let n = self.plan.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        for (i, l) in self.plan.layers.iter().enumerate() {
            let prev = if i == 0 { input } else { &cache.outputs[i - 1] };
            let mut x = if l.upsample { prev.upsample_nearest2() } else { prev.clone() };
            if let Some(s) = l.skip_from {
                x = Tensor::concat(x, &cache.outputs[s]);
            }
            let (wo, bo) = offsets[i];
            let pre = conv_forward(&x, &weights[wo..bo], &weights[bo..bo + l.out_ch], l.out_ch, l.stride);
            let out = Tensor {
                data: pre.data.iter().map(|&v| activate(l.activation, v)).collect(),
                ..pre.clone()
            };
            cache.inputs.push(x);
            cache.pre.push(pre);
            cache.outputs.push(out);
        }
        Ok(cache)
    }

    /// Forward pass returning just the image.
    pub fn render(&self, input: &Tensor) -> Result<ImageRGB, RenderError> {
        let cache = self.forward(input)?;
        Ok(ImageRGB::from_planar(cache.output()))
    }

    /// Reverse-mode pass. Returns the flat parameter gradient and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> (Vec<f64>, Tensor) {
        let weights: Vec<f64> = self.params.iter().map(|&v| v as f64).collect();
        let offsets = self.layer_offsets();
        let n = self.plan.layers.len();
        let mut grad_params = vec![0.0; self.params.len()];
        let mut grad_out: Vec<Option<Tensor>> = vec![None; n];
        grad_out[n - 1] = Some(grad_output.clone());
        let mut grad_input = Tensor::zeros(self.plan.input_channels, 0, 0);
        for i in (0..n).rev() {
            let l = &self.plan.layers[i];
            let Some(g) = grad_out[i].take() else {
                continue;
            };
            let pre = &cache.pre[i];
            let out = &cache.outputs[i];
            let g_pre = Tensor {
                data: g
                    .data
                    .iter()
                    .zip(&pre.data)
                    .zip(&out.data)
                    .map(|((&g, &p), &o)| g * activation_grad(l.activation, p, o))
                    .collect(),
                ..g
            };
            let (wo, bo) = offsets[i];
            let x = &cache.inputs[i];
            let (gw, gb) = conv_backward_params(x, &g_pre, l.stride);
            grad_params[wo..bo].copy_from_slice(&gw);
            grad_params[bo..bo + l.out_ch].copy_from_slice(&gb);
            let gx = conv_backward_input(&g_pre, &weights[wo..bo], x.channels, x.height, x.width, l.stride);

            let prev_ch = l.in_ch - l.skip_from.map_or(0, |s| self.plan.layers[s].out_ch);
            let hw = gx.height * gx.width;
            let mut g_prev = Tensor {
                channels: prev_ch,
                height: gx.height,
                width: gx.width,
                data: gx.data[..prev_ch * hw].to_vec(),
            };
            if let Some(s) = l.skip_from {
                let g_skip = &gx.data[prev_ch * hw..];
                accumulate(&mut grad_out[s], g_skip, self.plan.layers[s].out_ch, gx.height, gx.width);
            }
            if l.upsample {
                g_prev = g_prev.downsample_sum2();
            }
            if i == 0 {
                grad_input = g_prev;
            } else {
                let (c, h, w) = (g_prev.channels, g_prev.height, g_prev.width);
                accumulate(&mut grad_out[i - 1], &g_prev.data, c, h, w);
            }
        }
        (grad_params, grad_input)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &[f64], c: usize, h: usize, w: usize) {
    match slot {
        Some(t) => t.data.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            *slot = Some(Tensor {
                channels: c,
                height: h,
                width: w,
                data: g.to_vec(),
            })
        }
    }
}

#[inline]
fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        }
        Activation::Sigmoid => sigmoid(x),
        Activation::Identity => x,
    }
}

#[inline]
fn activation_grad(a: Activation, pre: f64, out: f64) -> f64 {
    match a {
        Activation::LeakyRelu => {
            if pre > 0.0 {
                1.0
            } else {
                LEAKY_SLOPE
            }
        }
        Activation::Sigmoid => out * (1.0 - out),
        Activation::Identity => 1.0,
    }
}

/// Output columns `ox` whose tap `kx` reads inside `[0, width)`.
#[inline]
fn valid_cols(k: usize, stride: usize, in_w: usize, out_w: usize) -> std::ops::Range<usize> {
    // ix = ox·stride + k − 1
    let lo = if k == 0 { 1 } else { 0 };
    let hi = ((in_w + 1 - k) / stride + usize::from(!(in_w + 1 - k).is_multiple_of(stride))).min(out_w);
    lo.min(hi)..hi
}

fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], out_ch: usize, stride: usize) -> Tensor {
    let (ic_n, h, wd) = (x.channels, x.height, x.width);
    let (oh, ow) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
    let mut out = Tensor::zeros(out_ch, oh, ow);
    out.data
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(oc, plane)| {
            plane.fill(b[oc]);
            for ic in 0..ic_n {
                let src = x.plane(ic);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = w[((oc * ic_n + ic) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = valid_cols(kx, stride, wd, ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = cols.start + kx - 1;
                                for (d, s) in dst[cols.clone()].iter_mut().zip(&row[off..]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in cols.clone() {
                                    dst[ox] += wv * row[ox * stride + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

fn conv_backward_input(g: &Tensor, w: &[f64], in_ch: usize, h: usize, wd: usize, stride: usize) -> Tensor {
    let (oc_n, oh, ow) = (g.channels, g.height, g.width);
    let mut gx = Tensor::zeros(in_ch, h, wd);
    gx.data
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(ic, plane)| {
            for oc in 0..oc_n {
                let gp = g.plane(oc);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = w[((oc * in_ch + ic) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = valid_cols(kx, stride, wd, ow);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            let dst = &mut plane[iy as usize * wd..(iy as usize + 1) * wd];
                            if stride == 1 {
                                let off = cols.start + kx - 1;
                                for (d, s) in dst[off..].iter_mut().zip(&grow[cols.clone()]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in cols.clone() {
                                    dst[ox * stride + kx - 1] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    gx
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_backward_params(x: &Tensor, g: &Tensor, stride: usize) -> (Vec<f64>, Vec<f64>) {
    let (ic_n, h, wd) = (x.channels, x.height, x.width);
    let (oc_n, oh, ow) = (g.channels, g.height, g.width);
    let per_oc: Vec<(Vec<f64>, f64)> = (0..oc_n)
        .into_par_iter()
        .map(|oc| {
            let gp = g.plane(oc);
            let mut gw = vec![0.0; ic_n * 9];
            let mut strided = vec![0.0; ow];
            for ic in 0..ic_n {
                let src = x.plane(ic);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let cols = valid_cols(kx, stride, wd, ow);
                        let mut sum = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = cols.start + kx - 1;
                                let len = cols.len();
                                sum += dot(&grow[cols.clone()], &row[off..off + len]);
                            } else {
                                for ox in cols.clone() {
                                    strided[ox] = row[ox * stride + kx - 1];
                                }
                                sum += dot(&grow[cols.clone()], &strided[cols.clone()]);
                            }
                        }
                        gw[(ic * 3 + ky) * 3 + kx] = sum;
                    }
                }
            }
            (gw, gp.iter().sum())
        })
        .collect();
    let mut gw = Vec::with_capacity(oc_n * ic_n * 9);
    let mut gb = Vec::with_capacity(oc_n);
    for (w, b) in per_oc {
        gw.extend(w);
        gb.push(b);
    }
    (gw, gb)
}
