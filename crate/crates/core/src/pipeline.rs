//! Frame-to-frame orchestration: buffer-guided low-res rendering, warping of
//! buffered frames, upsampling and neural reconstruction.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::field::{OccupancyGrid, VoxelField};
use crate::geometry::{downscale_intrinsics, CameraIntrinsics, Pose};
use crate::imaging::ImageRGB;
use crate::neural_render::{ConvRenderer, Tensor};
use crate::reproject::{upsample_frame, warp_to_highres, WarpedFeatureMap};
use crate::volren::{build_intervals, render_frame, DepthRange, FeatureFrame, GuidanceConfig, IntervalMap, MarchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Downsample factor between target and feature resolution.
    pub scale: u32,
    /// Feature channels K.
    pub channels: usize,
    /// Buffer length L.
    pub buffer_len: usize,
    pub guidance: GuidanceConfig,
    pub march: MarchConfig,
    pub range: DepthRange,
    pub use_guidance: bool,
    pub use_neural_renderer: bool,
}

impl PipelineConfig {
    /// Defaults: s = 4, K = 6, L = 2, ε = 5% of the depth range, validity at opacity 0.5.
    pub fn with_range(range: DepthRange) -> Self {
        PipelineConfig {
            scale: 4,
            channels: 6,
            buffer_len: 2,
            guidance: GuidanceConfig {
                epsilon: 0.05 * range.len(),
                opacity_valid: 0.5,
            },
            march: MarchConfig::default(),
            range,
            use_guidance: true,
            use_neural_renderer: true,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.scale < 1 {
            return bad("scale must be >= 1");
        }
        if self.channels < 3 {
            return bad("need at least 3 feature channels");
        }
        if !(self.guidance.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.range.near >= 0.0 && self.range.near < self.range.far) {
            return bad("depth range must satisfy 0 <= near < far");
        }
        let m = &self.march;
        if !(m.step > 0.0) || !(0.0..1.0).contains(&m.t_min_transmittance) || m.max_samples < 1 {
            return bad("march config needs step > 0, 0 <= T_min < 1, max_samples >= 1");
        }
        Ok(())
    }

    /// Input channels of the neural renderer: `L·(K+1) + K`.
    pub fn renderer_input_channels(&self) -> usize {
        self.buffer_len * (self.channels + 1) + self.channels
    }
}

/// FIFO of the most recent low-res frames.
#[derive(Clone, Debug, Default)]
pub struct RenderBuffer {
    capacity: usize,
    frames: VecDeque<FeatureFrame>,
}

impl RenderBuffer {
    pub fn new(capacity: usize) -> Self {
        RenderBuffer {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: FeatureFrame) {
        if self.capacity == 0 {
            return;
        }
        while self.frames.len() >= self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn newest(&self) -> Option<&FeatureFrame> {
        self.frames.back()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &FeatureFrame> {
        self.frames.iter()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub samples_total: u64,
    pub samples_per_ray_mean: f64,
    pub ms_volume: f64,
    /// Depth reprojection for guidance, feature warps, upsampling and input assembly.
    pub ms_warp: f64,
    pub ms_neural: f64,
    /// Wall time of the whole frame.
    pub ms_total: f64,
    pub guided_pixel_fraction: f64,
}

/// Sub-rectangle of the target image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Rect {
            x: 0,
            y: 0,
            width,
            height,
        }
    }
}

/// Concatenates the renderer input over `crop`: for each slot (oldest → newest) `K`
/// warped feature channels plus a validity channel, then the `K` upsampled current
/// channels. Empty slots are zero. Maps are full-size row-major (`full_w` wide).
pub fn assemble_input(
    slots: &[Option<WarpedFeatureMap>],
    current_up: &[f64],
    full_w: usize,
    channels: usize,
    crop: Rect,
) -> Tensor {
    let k = channels;
    let c_total = slots.len() * (k + 1) + k;
    let n = crop.width * crop.height;
    let mut t = Tensor::zeros(c_total, crop.height, crop.width);
    for y in 0..crop.height {
        for x in 0..crop.width {
            let src = (crop.y + y) * full_w + crop.x + x;
            let dst = y * crop.width + x;
            for (s, slot) in slots.iter().enumerate() {
                let Some(w) = slot else { continue };
                if !w.valid[src] {
                    continue;
                }
                let base = s * (k + 1);
                for c in 0..k {
                    t.data[(base + c) * n + dst] = w.features[src * k + c];
                }
                t.data[(base + k) * n + dst] = 1.0;
            }
            let base = slots.len() * (k + 1);
            for c in 0..k {
                t.data[(base + c) * n + dst] = current_up[src * k + c];
            }
        }
    }
    t
}

/// Splits a renderer input gradient back into full-size row-major feature gradients:
/// one per slot (validity channels dropped) and one for the upsampled current map.
pub fn split_input_grad(
    grad: &Tensor,
    slots: usize,
    channels: usize,
    full_w: usize,
    full_h: usize,
    crop: Rect,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = channels;
    let n = crop.width * crop.height;
    let mut slot_grads = vec![vec![0.0; full_w * full_h * k]; slots];
    let mut current = vec![0.0; full_w * full_h * k];
    for y in 0..crop.height {
        for x in 0..crop.width {
            let dst = (crop.y + y) * full_w + crop.x + x;
            let src = y * crop.width + x;
            for (s, g) in slot_grads.iter_mut().enumerate() {
                for c in 0..k {
                    g[dst * k + c] = grad.data[(s * (k + 1) + c) * n + src];
                }
            }
            for c in 0..k {
                current[dst * k + c] = grad.data[((slots * (k + 1)) + c) * n + src];
            }
        }
    }
    (slot_grads, current)
}

/// Checks that a target camera is compatible with the pipeline and renderer.
pub fn check_target(
    config: &PipelineConfig,
    intr_high: &CameraIntrinsics,
    renderer: Option<&ConvRenderer>,
) -> Result<CameraIntrinsics, PipelineError> {
    let divisor = renderer.map_or(1, |r| r.size_divisor() as u32).max(1);
    let (w, h) = (intr_high.width, intr_high.height);
    if w % config.scale != 0 || h % config.scale != 0 || w % divisor != 0 || h % divisor != 0 {
        return Err(PipelineError::Size {
            width: w,
            height: h,
            scale: config.scale,
            divisor,
        });
    }
    Ok(downscale_intrinsics(intr_high, config.scale)?)
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One viewer's rendering state: configuration plus the frame buffer.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    buffer: RenderBuffer,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline {
            config,
            buffer: RenderBuffer::new(config.buffer_len),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn set_use_guidance(&mut self, on: bool) {
        self.config.use_guidance = on;
    }

    pub fn set_use_neural_renderer(&mut self, on: bool) {
        self.config.use_neural_renderer = on;
    }

    pub fn buffer(&self) -> &RenderBuffer {
        &self.buffer
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
    }

    pub fn render_next(
        &mut self,
        field: &VoxelField,
        occ: &OccupancyGrid,
        renderer: &ConvRenderer,
        pose: &Pose,
        intr_high: &CameraIntrinsics,
    ) -> Result<(ImageRGB, FrameStats), PipelineError> {
        let frame_start = Instant::now();
        let cfg = self.config;
        if field.channels() != cfg.channels {
            return Err(PipelineError::Channels {
                field: field.channels(),
                config: cfg.channels,
            });
        }
        let use_nn = cfg.use_neural_renderer;
        if use_nn && renderer.input_channels() != cfg.renderer_input_channels() {
            return Err(crate::error::RenderError::ChannelMismatch {
                expected: cfg.renderer_input_channels(),
                got: renderer.input_channels(),
            }
            .into());
        }
        let intr_low = check_target(&cfg, intr_high, use_nn.then_some(renderer))?;
        let (wl, hl) = (intr_low.width as usize, intr_low.height as usize);
        let mut stats = FrameStats::default();

        let t = Instant::now();
        let intervals = match (cfg.use_guidance, self.buffer.newest()) {
            (true, Some(prev)) => build_intervals(prev, pose, &intr_low, &cfg.guidance, &cfg.range),
            _ => IntervalMap::full(wl, hl),
        };
        stats.guided_pixel_fraction = intervals.guided_fraction();
        stats.ms_warp += ms_since(t);

        let t = Instant::now();
        let frame = render_frame(field, occ, pose, &intr_low, &intervals, &cfg.range, &cfg.march);
        stats.ms_volume = ms_since(t);
        stats.samples_total = frame.samples_taken;
        stats.samples_per_ray_mean = frame.samples_per_ray();

        let (w, h) = (intr_high.width as usize, intr_high.height as usize);
        let image = if use_nn {
            let t = Instant::now();
            let mut slots: Vec<Option<WarpedFeatureMap>> = vec![None; cfg.buffer_len - self.buffer.len()];
            slots.extend(
                self.buffer
                    .iter()
                    .map(|prev| Some(warp_to_highres(prev, pose, intr_high, cfg.guidance.opacity_valid))),
            );
            let up = upsample_frame(&frame, cfg.scale as usize);
            let input = assemble_input(&slots, &up, w, cfg.channels, Rect::full(w, h));
            stats.ms_warp += ms_since(t);

            let t = Instant::now();
            let image = renderer.render(&input)?;
            stats.ms_neural = ms_since(t);
            image
        } else {
            let t = Instant::now();
            let up = upsample_frame(&frame, cfg.scale as usize);
            let image = ImageRGB::from_feature_map(&up, w, h, cfg.channels);
            stats.ms_warp += ms_since(t);
            image
        };

        self.buffer.push(frame);
        stats.ms_total = ms_since(frame_start);
        Ok((image, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Vec3};
    use crate::neural_render::LayerPlan;

    fn setup(buffer_len: usize) -> (VoxelField, OccupancyGrid, ConvRenderer, PipelineConfig, CameraIntrinsics) {
        let field = VoxelField::new([8, 8, 8], Aabb::cube(1.0), 3, 1).unwrap();
        let occ = OccupancyGrid::for_field(&field, [4, 4, 4], 0.01).unwrap();
        let mut cfg = PipelineConfig::with_range(DepthRange { near: 1.0, far: 5.0 });
        cfg.channels = 3;
        cfg.buffer_len = buffer_len;
        cfg.march.step = 0.05;
        let renderer = ConvRenderer::init(0, LayerPlan::default_for(cfg.renderer_input_channels())).unwrap();
        let intr = CameraIntrinsics::from_fov_y(40.0, 16, 16).unwrap();
        (field, occ, renderer, cfg, intr)
    }

    fn orbit(i: usize) -> Pose {
        let a = i as f64 * 0.02;
        Pose::look_at(Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.0), Vec3::zeros(), Vec3::z()).unwrap()
    }

    #[test]
    fn buffer_is_fifo() {
        let (field, occ, renderer, cfg, intr) = setup(2);
        let mut p = Pipeline::new(cfg).unwrap();
        for i in 0..5 {
            p.render_next(&field, &occ, &renderer, &orbit(i), &intr).unwrap();
            assert!(p.buffer().len() <= 2);
        }
        let poses: Vec<Pose> = p.buffer().iter().map(|f| f.pose).collect();
        assert_eq!(poses, vec![orbit(3), orbit(4)]);
    }

    #[test]
    fn cold_start_and_reset() {
        let (field, occ, renderer, cfg, intr) = setup(2);
        let mut p = Pipeline::new(cfg).unwrap();
        let (img0, s0) = p.render_next(&field, &occ, &renderer, &orbit(0), &intr).unwrap();
        assert_eq!(s0.guided_pixel_fraction, 0.0);
        p.render_next(&field, &occ, &renderer, &orbit(1), &intr).unwrap();
        p.reset();
        p.reset();
        assert!(p.buffer().is_empty());
        let (img1, s1) = p.render_next(&field, &occ, &renderer, &orbit(0), &intr).unwrap();
        assert_eq!(s1.guided_pixel_fraction, 0.0);
        assert_eq!(img0, img1);
    }

    #[test]
    fn full_range_epsilon_matches_unguided() {
        let (field, occ, renderer, mut cfg, intr) = setup(2);
        cfg.guidance.epsilon = 10.0;
        cfg.guidance.opacity_valid = 0.0;
        let mut guided = Pipeline::new(cfg).unwrap();
        cfg.use_guidance = false;
        let mut plain = Pipeline::new(cfg).unwrap();
        for i in 0..3 {
            let (a, _) = guided.render_next(&field, &occ, &renderer, &orbit(i), &intr).unwrap();
            let (b, _) = plain.render_next(&field, &occ, &renderer, &orbit(i), &intr).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_length_buffer_uses_current_only() {
        let (field, occ, _, cfg0, intr) = setup(0);
        let renderer = ConvRenderer::init(0, LayerPlan::default_for(3)).unwrap();
        let mut p = Pipeline::new(cfg0).unwrap();
        for i in 0..3 {
            let (_, s) = p.render_next(&field, &occ, &renderer, &orbit(i), &intr).unwrap();
            assert_eq!(s.guided_pixel_fraction, 0.0);
            assert!(p.buffer().is_empty());
        }
    }

    #[test]
    fn shape_and_channel_errors() {
        let (field, occ, renderer, cfg, _) = setup(2);
        let mut p = Pipeline::new(cfg).unwrap();
        let odd = CameraIntrinsics::from_fov_y(40.0, 18, 16).unwrap();
        assert!(matches!(
            p.render_next(&field, &occ, &renderer, &orbit(0), &odd),
            Err(PipelineError::Size { .. })
        ));
        let wrong = ConvRenderer::init(0, LayerPlan::default_for(5)).unwrap();
        let intr = CameraIntrinsics::from_fov_y(40.0, 16, 16).unwrap();
        assert!(p.render_next(&field, &occ, &wrong, &orbit(0), &intr).is_err());
        let mut bad = cfg;
        bad.channels = 2;
        assert!(Pipeline::new(bad).is_err());
    }

    #[test]
    fn baseline_without_network() {
        let (field, occ, renderer, mut cfg, intr) = setup(2);
        cfg.use_neural_renderer = false;
        let mut p = Pipeline::new(cfg).unwrap();
        let (img, s) = p.render_next(&field, &occ, &renderer, &orbit(0), &intr).unwrap();
        assert_eq!(s.ms_neural, 0.0);
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn input_split_round_trip() {
        let (w, h, k) = (8, 4, 2);
        let mut warped = WarpedFeatureMap::empty(w, h, k);
        for p in 0..w * h {
            warped.valid[p] = p % 3 == 0;
            if warped.valid[p] {
                warped.features[p * k] = p as f64;
                warped.features[p * k + 1] = -(p as f64);
            }
        }
        let up: Vec<f64> = (0..w * h * k).map(|i| i as f64 * 0.1).collect();
        let crop = Rect { x: 4, y: 0, width: 4, height: 4 };
        let slots = vec![None, Some(warped.clone())];
        let t = assemble_input(&slots, &up, w, k, crop);
        assert_eq!(t.channels, 2 * 3 + 2);
        let (sg, cg) = split_input_grad(&t, 2, k, w, h, crop);
        assert!(sg[0].iter().all(|&v| v == 0.0));
        for y in 0..4 {
            for x in 4..8 {
                let p = y * w + x;
                assert_eq!(&cg[p * k..p * k + k], &up[p * k..p * k + k]);
                assert_eq!(&sg[1][p * k..p * k + k], &warped.features[p * k..p * k + k]);
                assert_eq!(t.data[(2 * 3 - 1) * 16 + y * 4 + x - 4], if warped.valid[p] { 1.0 } else { 0.0 });
            }
        }
    }
}
