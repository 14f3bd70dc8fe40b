//! Field pre-training, joint field + renderer training on patches, distillation.

pub mod metrics;
pub mod optim;

use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::field::{rebuild_occupancy, OccupancyGrid, SparseGrad, VoxelField};
use crate::geometry::{downscale_intrinsics, Aabb, generate_ray, CameraIntrinsics, PixelCoord, Pose, Vec3};
use crate::imaging::ImageRGB;
use crate::neural_render::{ConvRenderer, LayerPlan, Tensor};
use crate::scene::Checkpoint;
use crate::pipeline::{assemble_input, check_target, split_input_grad, PipelineConfig, Rect};
use crate::reproject::{upsample_backward, upsample_frame, warp_to_highres, WarpedFeatureMap};
use crate::volren::{build_intervals, march, march_backward, render_frame, render_frame_backward, FeatureFrame, IntervalMap};

pub use metrics::{mse, psnr, psnr_from_mse, ssim, PSNR_CAP};
pub use optim::{Adam, AdamConfig};

/// Rays per parallel work item in pre-training.
const RAY_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: ImageRGB,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Rendered by the field itself rather than observed.
    pub pseudo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub views: Vec<View>,
}

impl Dataset {
    pub fn new(split: Split) -> Self {
        Dataset { split, views: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of the field's feature channels.
    pub lr_field: f64,
    /// Learning rate of the field's raw densities.
    pub lr_density: f64,
    /// Field learning rates decay exponentially to this fraction over pretraining.
    pub lr_decay: f64,
    pub lr_renderer: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters_pretrain: usize,
    pub iters_joint: usize,
    /// High-res patch side for joint training.
    pub patch: usize,
    pub rays_per_batch: usize,
    /// Largest rotation between a synthesized sequence start and the target, degrees.
    pub seq_max_rotation_deg: f64,
    /// Largest camera offset of a sequence start, as a fraction of the scene radius.
    pub seq_max_translation: f64,
    pub distill_count: usize,
    pub occupancy_interval: usize,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_field: 1e-2,
            lr_density: 1.0,
            lr_decay: 1.0,
            lr_renderer: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iters_pretrain: 2000,
            iters_joint: 2000,
            patch: 64,
            rays_per_batch: 1024,
            seq_max_rotation_deg: 4.0,
            seq_max_translation: 0.2,
            distill_count: 0,
            occupancy_interval: 100,
            log_interval: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, pcfg: &PipelineConfig) -> Result<(), TrainError> {
        let unit = 4 * pcfg.scale as usize;
        if self.patch == 0 || !self.patch.is_multiple_of(unit) {
            return Err(TrainError::Config(format!("patch {} must be a positive multiple of {unit}", self.patch)));
        }
        if self.rays_per_batch == 0 {
            return Err(TrainError::Config("rays_per_batch must be positive".into()));
        }
        if self.occupancy_interval == 0 {
            return Err(TrainError::Config("occupancy_interval must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
}

fn views_ok(data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(())
}

/// Fits the field's first three channels to the images with random full-range rays.
/// Returns the per-iteration loss.
pub fn pretrain(
    field: &mut VoxelField,
    occ: &mut OccupancyGrid,
    data: &Dataset,
    cfg: &TrainConfig,
    pcfg: &PipelineConfig,
    log: &mut dyn FnMut(LogRecord),
) -> Result<Vec<f64>, TrainError> {
    views_ok(data)?;
    cfg.validate(pcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(field.param_count(), cfg.adam(cfg.lr_field));
    let mut grad = vec![0.0; field.param_count()];
    let mut curve = Vec::with_capacity(cfg.iters_pretrain);
    let k = field.channels();
    let (range, march_cfg) = (pcfg.range, pcfg.march);
    for it in 0..cfg.iters_pretrain {
        let rays: Vec<(usize, usize)> = (0..cfg.rays_per_batch)
            .map(|_| {
                let v = rng.random_range(0..data.len());
                (v, rng.random_range(0..data.views[v].intrinsics.pixel_count()))
            })
            .collect();
        let norm = 1.0 / (3 * rays.len()) as f64;
        let fld: &VoxelField = field;
        let occ_ref: &OccupancyGrid = occ;
        let parts: Vec<(f64, SparseGrad)> = rays
            .par_chunks(RAY_CHUNK)
            .map(|chunk| {
                let mut sparse = SparseGrad::default();
                let mut loss = 0.0;
                let mut g = vec![0.0; k];
                for &(v, p) in chunk {
                    let view = &data.views[v];
                    let w = view.intrinsics.width as usize;
                    let ray = generate_ray(&view.intrinsics, &view.pose, PixelCoord::center(p % w, p / w), range.near, range.far);
                    let r = march(fld, occ_ref, &ray, (range.near, range.far), &march_cfg);
                    for c in 0..3 {
                        let d = r.feature[c] - view.image.data[p * 3 + c];
                        loss += d * d;
                        g[c] = 2.0 * d * norm;
                    }
                    march_backward(fld, occ_ref, &ray, (range.near, range.far), &march_cfg, &g, &mut sparse);
                }
                (loss, sparse)
            })
            .collect();
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut loss = 0.0;
        for (l, part) in &parts {
            loss += l;
            part.merge_into(&mut grad);
        }
        loss *= norm;
        let n = field.voxel_count();
        let decay = cfg.lr_decay.powf(it as f64 / cfg.iters_pretrain as f64);
        adam.config.lr = cfg.lr_field * decay;
        adam.step_split(field.params_mut(), &grad, n, cfg.lr_density * decay);
        if (it + 1) % cfg.occupancy_interval == 0 {
            rebuild_occupancy(field, occ)?;
        }
        if it % cfg.log_interval == 0 || it + 1 == cfg.iters_pretrain {
            log(LogRecord {
                stage: Stage::Pretrain,
                iter: it,
                loss,
                psnr: psnr_from_mse(loss),
            });
        }
        curve.push(loss);
    }
    Ok(curve)
}

/// `L` poses leading up to `target`, oldest first: a start pose perturbed by at most
/// `max_rotation_deg` and `max_translation`, moved toward the target along the rotation
/// geodesic and a straight line in `L + 1` steps.
pub fn synth_pose_sequence(
    target: &Pose,
    l: usize,
    max_rotation_deg: f64,
    max_translation: f64,
    rng: &mut impl Rng,
) -> Vec<Pose> {
    if l == 0 {
        return Vec::new();
    }
    let random_unit = |rng: &mut dyn rand::RngCore| loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if let Some(u) = v.try_normalize(1e-9) {
            return u;
        }
    };
    let axis = Unit::new_unchecked(random_unit(rng));
    let angle = rng.random_range(0.0..=1.0) * max_rotation_deg.to_radians();
    let offset = random_unit(rng) * rng.random_range(0.0..=1.0) * max_translation;
    let center = target.center();
    (0..l)
        .map(|i| {
            let remaining = 1.0 - i as f64 / l as f64;
            if angle == 0.0 && offset == Vec3::zeros() {
                return *target;
            }
            let delta = UnitQuaternion::from_axis_angle(&axis, angle * remaining).to_rotation_matrix();
            Pose::from_rotation_center(delta.matrix() * target.rotation, center + offset * remaining)
        })
        .collect()
}

/// Renders low-res frames along `poses` as the pipeline would after a reset: the first
/// at full range, each later one guided by its predecessor when guidance is on.
pub fn render_sequence(
    field: &VoxelField,
    occ: &OccupancyGrid,
    poses: &[Pose],
    intr_low: &CameraIntrinsics,
    pcfg: &PipelineConfig,
) -> (Vec<FeatureFrame>, Vec<IntervalMap>) {
    let (w, h) = (intr_low.width as usize, intr_low.height as usize);
    let mut frames: Vec<FeatureFrame> = Vec::with_capacity(poses.len());
    let mut intervals = Vec::with_capacity(poses.len());
    for pose in poses {
        let map = match frames.last() {
            Some(prev) if pcfg.use_guidance => build_intervals(prev, pose, intr_low, &pcfg.guidance, &pcfg.range),
            _ => IntervalMap::full(w, h),
        };
        frames.push(render_frame(field, occ, pose, intr_low, &map, &pcfg.range, &pcfg.march));
        intervals.push(map);
    }
    (frames, intervals)
}

/// Everything about one joint-training sample that is held constant under
/// differentiation: sampling intervals, warp assignments and the crop.
#[derive(Clone, Debug)]
pub struct JointGeometry {
    /// Preceding poses oldest first, then the target pose.
    pub poses: Vec<Pose>,
    pub intervals: Vec<IntervalMap>,
    /// One per preceding pose, warped into the target view at full resolution.
    pub warps: Vec<WarpedFeatureMap>,
    pub crop: Rect,
    pub intr_low: CameraIntrinsics,
    pub intr_high: CameraIntrinsics,
}

impl JointGeometry {
    /// Renders the sequence and fixes its geometry. Returns the rendered frames too.
    pub fn build(
        field: &VoxelField,
        occ: &OccupancyGrid,
        poses: Vec<Pose>,
        intr_high: &CameraIntrinsics,
        pcfg: &PipelineConfig,
        crop: Rect,
    ) -> Result<(Self, Vec<FeatureFrame>), TrainError> {
        let intr_low = downscale_intrinsics(intr_high, pcfg.scale)?;
        let (frames, intervals) = render_sequence(field, occ, &poses, &intr_low, pcfg);
        let target = *poses.last().expect("at least the target pose");
        let warps = frames[..frames.len() - 1]
            .iter()
            .map(|f| warp_to_highres(f, &target, intr_high, pcfg.guidance.opacity_valid))
            .collect();
        Ok((
            JointGeometry {
                poses,
                intervals,
                warps,
                crop,
                intr_low,
                intr_high: *intr_high,
            },
            frames,
        ))
    }

    /// Re-renders all frames with the frozen intervals.
    pub fn render_frames(&self, field: &VoxelField, occ: &OccupancyGrid, pcfg: &PipelineConfig) -> Vec<FeatureFrame> {
        self.poses
            .iter()
            .zip(&self.intervals)
            .map(|(pose, map)| render_frame(field, occ, pose, &self.intr_low, map, &pcfg.range, &pcfg.march))
            .collect()
    }

    fn renderer_input(&self, frames: &[FeatureFrame], pcfg: &PipelineConfig) -> Tensor {
        let slots: Vec<Option<WarpedFeatureMap>> = self
            .warps
            .iter()
            .zip(frames)
            .map(|(w, f)| {
                let mut warped = w.clone();
                warped.features = w.rescatter(&f.features);
                Some(warped)
            })
            .collect();
        let current = frames.last().expect("target frame");
        let up = upsample_frame(current, pcfg.scale as usize);
        assemble_input(&slots, &up, self.intr_high.width as usize, pcfg.channels, self.crop)
    }
}

/// Mean squared error between planar RGB output and the matching crop of `target`,
/// with its gradient.
fn patch_loss(out: &Tensor, target: &ImageRGB, crop: Rect) -> (f64, Tensor) {
    let n = crop.width * crop.height;
    let norm = 1.0 / (3 * n) as f64;
    let mut grad = Tensor::zeros(3, crop.height, crop.width);
    let mut loss = 0.0;
    for y in 0..crop.height {
        for x in 0..crop.width {
            let p = y * crop.width + x;
            let t = ((crop.y + y) * target.width + crop.x + x) * 3;
            for c in 0..3 {
                let d = out.data[c * n + p] - target.data[t + c];
                loss += d * d;
                grad.data[c * n + p] = 2.0 * d * norm;
            }
        }
    }
    (loss * norm, grad)
}

/// Joint loss with geometry frozen, re-rendering every frame from `field`.
pub fn joint_loss(
    field: &VoxelField,
    occ: &OccupancyGrid,
    renderer: &ConvRenderer,
    geom: &JointGeometry,
    target: &ImageRGB,
    pcfg: &PipelineConfig,
) -> Result<f64, TrainError> {
    let frames = geom.render_frames(field, occ, pcfg);
    let cache = renderer.forward(&geom.renderer_input(&frames, pcfg))?;
    Ok(patch_loss(cache.output(), target, geom.crop).0)
}

pub struct JointGradients {
    pub loss: f64,
    pub field: Vec<f64>,
    pub renderer: Vec<f64>,
}

/// Loss and gradients through renderer, warp and upsample transposes into every
/// frame's march. Only the final image is supervised.
pub fn joint_gradients(
    field: &VoxelField,
    occ: &OccupancyGrid,
    renderer: &ConvRenderer,
    geom: &JointGeometry,
    frames: &[FeatureFrame],
    target: &ImageRGB,
    pcfg: &PipelineConfig,
) -> Result<JointGradients, TrainError> {
    let cache = renderer.forward(&geom.renderer_input(frames, pcfg))?;
    let (loss, grad_out) = patch_loss(cache.output(), target, geom.crop);
    let (grad_renderer, grad_in) = renderer.backward(&cache, &grad_out);
    let k = pcfg.channels;
    let (w, h) = (geom.intr_high.width as usize, geom.intr_high.height as usize);
    let (slot_grads, current_grad) = split_input_grad(&grad_in, geom.warps.len(), k, w, h, geom.crop);

    let mut grad_field = vec![0.0; field.param_count()];
    let (wl, hl) = (geom.intr_low.width as usize, geom.intr_low.height as usize);
    let mut frame_grads: Vec<Vec<f64>> = geom
        .warps
        .iter()
        .zip(&slot_grads)
        .map(|(warp, g)| {
            let mut low = vec![0.0; wl * hl * k];
            warp.backward(g, &mut low);
            low
        })
        .collect();
    frame_grads.push(upsample_backward(&current_grad, wl, hl, k, pcfg.scale as usize));
    for ((pose, map), g) in geom.poses.iter().zip(&geom.intervals).zip(&frame_grads) {
        render_frame_backward(field, occ, pose, &geom.intr_low, map, &pcfg.range, &pcfg.march, g, &mut grad_field);
    }
    Ok(JointGradients {
        loss,
        field: grad_field,
        renderer: grad_renderer,
    })
}

/// Optimizer state for joint training.
pub struct JointOptimizer {
    pub field: Adam,
    pub renderer: Adam,
}

impl JointOptimizer {
    pub fn new(field: &VoxelField, renderer: &ConvRenderer, cfg: &TrainConfig) -> Self {
        JointOptimizer {
            field: Adam::new(field.param_count(), cfg.adam(cfg.lr_field)),
            renderer: Adam::new(renderer.params().len(), cfg.adam(cfg.lr_renderer)),
        }
    }
}

/// Scene radius used to scale pose-sequence translations.
fn scene_radius(field: &VoxelField) -> f64 {
    let b = field.bounds();
    (0..3).map(|a| b.extent(a)).fold(0.0, f64::max) / 2.0
}

/// Picks a random crop aligned to the low-res grid.
fn random_crop(intr_high: &CameraIntrinsics, patch: usize, scale: usize, rng: &mut impl Rng) -> Rect {
    let pick = |size: usize, rng: &mut dyn rand::RngCore| -> usize {
        let slots = (size - patch) / scale;
        rng.random_range(0..=slots) * scale
    };
    let x = pick(intr_high.width as usize, rng);
    let y = pick(intr_high.height as usize, rng);
    Rect {
        x,
        y,
        width: patch,
        height: patch,
    }
}

/// One joint iteration on `view`: synthesize preceding poses, render the chain, crop a
/// patch, backpropagate the image loss into both parameter sets and take an Adam step.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    field: &mut VoxelField,
    occ: &OccupancyGrid,
    renderer: &mut ConvRenderer,
    opt: &mut JointOptimizer,
    view: &View,
    cfg: &TrainConfig,
    pcfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    let intr_high = view.intrinsics;
    check_target(pcfg, &intr_high, None)?;
    if cfg.patch > intr_high.width as usize || cfg.patch > intr_high.height as usize {
        return Err(TrainError::Config(format!(
            "patch {} exceeds image {}x{}",
            cfg.patch, intr_high.width, intr_high.height
        )));
    }
    let mut poses = synth_pose_sequence(
        &view.pose,
        pcfg.buffer_len,
        cfg.seq_max_rotation_deg,
        cfg.seq_max_translation * scene_radius(field),
        rng,
    );
    poses.push(view.pose);
    let crop = random_crop(&intr_high, cfg.patch, pcfg.scale as usize, rng);
    let (geom, frames) = JointGeometry::build(field, occ, poses, &intr_high, pcfg, crop)?;
    let g = joint_gradients(field, occ, renderer, &geom, &frames, &view.image, pcfg)?;
    let n = field.voxel_count();
    opt.field.step_split(field.params_mut(), &g.field, n, cfg.lr_density);
    opt.renderer.step(renderer.params_mut(), &g.renderer);
    Ok(g.loss)
}

/// Joint training over random training views. Returns the per-iteration loss.
#[allow(clippy::too_many_arguments)]
pub fn joint_train(
    field: &mut VoxelField,
    occ: &mut OccupancyGrid,
    renderer: &mut ConvRenderer,
    data: &Dataset,
    cfg: &TrainConfig,
    pcfg: &PipelineConfig,
    log: &mut dyn FnMut(LogRecord),
) -> Result<Vec<f64>, TrainError> {
    views_ok(data)?;
    cfg.validate(pcfg)?;
    pcfg.validate()?;
    if renderer.input_channels() != pcfg.renderer_input_channels() {
        return Err(crate::error::RenderError::ChannelMismatch {
            expected: pcfg.renderer_input_channels(),
            got: renderer.input_channels(),
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a6f_696e_74);
    let mut opt = JointOptimizer::new(field, renderer, cfg);
    let mut curve = Vec::with_capacity(cfg.iters_joint);
    for it in 0..cfg.iters_joint {
        let view = &data.views[rng.random_range(0..data.len())];
        let loss = joint_step(field, occ, renderer, &mut opt, view, cfg, pcfg, &mut rng)?;
        if (it + 1) % cfg.occupancy_interval == 0 {
            rebuild_occupancy(field, occ)?;
        }
        if it % cfg.log_interval == 0 || it + 1 == cfg.iters_joint {
            log(LogRecord {
                stage: Stage::Joint,
                iter: it,
                loss,
                psnr: psnr_from_mse(loss),
            });
        }
        curve.push(loss);
    }
    Ok(curve)
}

/// Camera positions on a spherical shell segment looking at `target`. Angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewingZone {
    pub target: [f64; 3],
    pub radius: (f64, f64),
    pub azimuth_deg: (f64, f64),
    pub elevation_deg: (f64, f64),
}

impl ViewingZone {
    pub fn sample(&self, rng: &mut impl Rng) -> Pose {
        let lerp = |(a, b): (f64, f64), u: f64| a + (b - a) * u;
        let r = lerp(self.radius, rng.random_range(0.0..=1.0));
        let az = lerp(self.azimuth_deg, rng.random_range(0.0..=1.0)).to_radians();
        let el = lerp(self.elevation_deg, rng.random_range(0.0..=1.0)).to_radians();
        Pose::orbit(Vec3::from(self.target), r, az, el).expect("elevation below the pole")
    }

    /// Whether the camera center lies in the zone (within `tol`).
    pub fn contains(&self, pose: &Pose, tol: f64) -> bool {
        let d = pose.center() - Vec3::from(self.target);
        let r = d.norm();
        let el = (d.z / r).asin().to_degrees();
        let mut az = d.y.atan2(d.x).to_degrees();
        let (a0, a1) = self.azimuth_deg;
        while az < a0 - tol {
            az += 360.0;
        }
        while az > a1 + tol && az - 360.0 >= a0 - tol {
            az -= 360.0;
        }
        r >= self.radius.0 - tol
            && r <= self.radius.1 + tol
            && el >= self.elevation_deg.0 - tol
            && el <= self.elevation_deg.1 + tol
            && az >= a0 - tol
            && az <= a1 + tol
    }
}

/// Renders `pose` at full resolution and full range; the first three channels, clamped.
pub fn render_rgb(
    field: &VoxelField,
    occ: &OccupancyGrid,
    pose: &Pose,
    intr: &CameraIntrinsics,
    pcfg: &PipelineConfig,
) -> ImageRGB {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let frame = render_frame(field, occ, pose, intr, &IntervalMap::full(w, h), &pcfg.range, &pcfg.march);
    ImageRGB::from_feature_map(&frame.features, w, h, frame.channels)
}

/// Pseudo ground truth: `n` field renders at poses sampled from `zone`.
pub fn distill(
    field: &VoxelField,
    occ: &OccupancyGrid,
    zone: &ViewingZone,
    n: usize,
    intr: &CameraIntrinsics,
    pcfg: &PipelineConfig,
    rng: &mut impl Rng,
) -> Dataset {
    let views = (0..n)
        .map(|_| {
            let pose = zone.sample(rng);
            View {
                image: render_rgb(field, occ, &pose, intr, pcfg),
                pose,
                intrinsics: *intr,
                pseudo: true,
            }
        })
        .collect();
    Dataset {
        split: Split::Train,
        views,
    }
}

/// Grid layout of a freshly initialized model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub occupancy_resolution: [usize; 3],
    pub occupancy_threshold: f64,
}

impl ViewingZone {
    /// Full azimuth circle, radius and elevation spanned by the given camera centers.
    pub fn enclosing(target: Vec3, poses: &[Pose]) -> Option<ViewingZone> {
        let mut radius = (f64::INFINITY, f64::NEG_INFINITY);
        let mut elevation = (f64::INFINITY, f64::NEG_INFINITY);
        for p in poses {
            let d = p.center() - target;
            let r = d.norm();
            let el = (d.z / r).asin().to_degrees();
            radius = (radius.0.min(r), radius.1.max(r));
            elevation = (elevation.0.min(el), elevation.1.max(el));
        }
        radius.1.is_finite().then_some(ViewingZone {
            target: target.into(),
            radius,
            azimuth_deg: (0.0, 360.0),
            elevation_deg: elevation,
        })
    }
}

/// Initializes a model, pre-trains the field, optionally distills `cfg.distill_count`
/// pseudo views from `zone`, then trains field and renderer jointly. The renderer is
/// initialized from `cfg.seed`.
pub fn train_checkpoint(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    pcfg: &PipelineConfig,
    zone: Option<&ViewingZone>,
    log: &mut dyn FnMut(LogRecord),
) -> Result<Checkpoint, TrainError> {
    views_ok(data)?;
    pcfg.validate()?;
    cfg.validate(pcfg)?;
    let mut field = VoxelField::new(spec.resolution, spec.bounds, pcfg.channels, cfg.seed)?;
    let mut occ = OccupancyGrid::for_field(&field, spec.occupancy_resolution, spec.occupancy_threshold)?;
    let mut renderer = ConvRenderer::init(cfg.seed, LayerPlan::default_for(pcfg.renderer_input_channels()))?;
    pretrain(&mut field, &mut occ, data, cfg, pcfg, log)?;
    rebuild_occupancy(&field, &mut occ)?;
    let intr = data.views[0].intrinsics;
    let joint_data = match zone {
        Some(zone) if cfg.distill_count > 0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6469_7374);
            let mut d = data.clone();
            d.views
                .extend(distill(&field, &occ, zone, cfg.distill_count, &intr, pcfg, &mut rng).views);
            d
        }
        _ => data.clone(),
    };
    joint_train(&mut field, &mut occ, &mut renderer, &joint_data, cfg, pcfg, log)?;
    Ok(Checkpoint {
        field,
        occupancy_resolution: spec.occupancy_resolution,
        occupancy_threshold: spec.occupancy_threshold,
        renderer,
        pipeline: *pcfg,
        meta: serde_json::json!({
            "seed": cfg.seed,
            "train": cfg,
            "intrinsics": intr,
        }),
    })
}
