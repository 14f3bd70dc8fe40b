//! Quadrature volume rendering of feature and depth maps.
//!
//! Samples sit at `t_i = t0 + (i + ½)·δ` inside the ray's interval. Samples in
//! unoccupied occupancy cells contribute nothing and are not queried; the march
//! stops once transmittance falls below the configured threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{GradSink, OccupancyGrid, SparseGrad, VoxelField};
use crate::geometry::{generate_ray, project, unproject, Aabb, CameraIntrinsics, PixelCoord, Pose, Ray, Vec3};

/// Pixels rendered per parallel work item. Fixed so gradient merge order never
/// depends on the thread count.
const PIXEL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub near: f64,
    pub far: f64,
}

impl DepthRange {
    pub fn len(&self) -> f64 {
        self.far - self.near
    }

    /// Smallest range covering `bounds` from every camera center, with `near` kept
    /// at least `min_near`.
    pub fn enclosing(bounds: &Aabb, centers: impl IntoIterator<Item = Vec3>, min_near: f64) -> Option<DepthRange> {
        let c = bounds.center();
        let half = Vec3::new(bounds.extent(0), bounds.extent(1), bounds.extent(2)).norm() / 2.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in centers {
            let d = (p - c).norm();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if !hi.is_finite() {
            return None;
        }
        Some(DepthRange {
            near: (lo - half).max(min_near),
            far: hi + half,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarchConfig {
    /// Constant step δ in world units.
    pub step: f64,
    /// Early termination once transmittance drops below this.
    pub t_min_transmittance: f64,
    /// Cap on step positions visited per ray.
    pub max_samples: usize,
}

impl Default for MarchConfig {
    fn default() -> Self {
        MarchConfig {
            step: 3.6 / 256.0,
            t_min_transmittance: 1e-3,
            max_samples: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayResult {
    pub feature: Vec<f64>,
    /// Expected ray-parameter depth `Σ T α t` (not normalized by opacity).
    pub depth: f64,
    pub opacity: f64,
    pub samples_taken: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct MarchSummary {
    depth: f64,
    transmittance: f64,
    samples: u32,
}

#[inline]
fn march_into(
    field: &VoxelField,
    occ: &OccupancyGrid,
    ray: &Ray,
    (t0, t1): (f64, f64),
    cfg: &MarchConfig,
    feature: &mut [f64],
    scratch: &mut [f64],
    mut visit: impl FnMut(usize, f64, f64, &[f64]),
) -> MarchSummary {
    feature.fill(0.0);
    let mut transmittance = 1.0;
    let mut depth = 0.0;
    let mut samples = 0u32;
    for i in 0..cfg.max_samples {
        let t = t0 + (i as f64 + 0.5) * cfg.step;
        if t >= t1 {
            break;
        }
        let x = ray.at(t);
        if !occ.is_occupied(&x) {
            continue;
        }
        let (sigma, _) = field.sample_into(&x, scratch);
        samples += 1;
        let alpha = 1.0 - (-sigma * cfg.step).exp();
        let w = transmittance * alpha;
        for (acc, &f) in feature.iter_mut().zip(scratch.iter()) {
            *acc += w * f;
        }
        depth += w * t;
        visit(i, t, sigma, scratch);
        transmittance *= 1.0 - alpha;
        if transmittance < cfg.t_min_transmittance {
            break;
        }
    }
    MarchSummary {
        depth,
        transmittance,
        samples,
    }
}

pub fn march(
    field: &VoxelField,
    occ: &OccupancyGrid,
    ray: &Ray,
    interval: (f64, f64),
    cfg: &MarchConfig,
) -> RayResult {
    let k = field.channels();
    let mut feature = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    let s = march_into(field, occ, ray, interval, cfg, &mut feature, &mut scratch, |_, _, _, _| {});
    RayResult {
        feature,
        depth: s.depth,
        opacity: 1.0 - s.transmittance,
        samples_taken: s.samples,
    }
}

/// One queried sample of a traced march.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Transmittance reaching the sample.
    pub transmittance: f64,
    pub weight: f64,
}

/// [`march`] that also returns every queried sample.
pub fn march_trace(
    field: &VoxelField,
    occ: &OccupancyGrid,
    ray: &Ray,
    interval: (f64, f64),
    cfg: &MarchConfig,
) -> (RayResult, Vec<TraceSample>) {
    let k = field.channels();
    let mut feature = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    let mut trace = Vec::new();
    let mut transmittance = 1.0;
    let s = march_into(field, occ, ray, interval, cfg, &mut feature, &mut scratch, |_, t, sigma, _| {
        let alpha = 1.0 - (-sigma * cfg.step).exp();
        trace.push(TraceSample {
            t,
            sigma,
            alpha,
            transmittance,
            weight: transmittance * alpha,
        });
        transmittance *= 1.0 - alpha;
    });
    let result = RayResult {
        feature,
        depth: s.depth,
        opacity: 1.0 - s.transmittance,
        samples_taken: s.samples,
    };
    (result, trace)
}

/// Accumulates the gradient of `grad_feature · f_r` w.r.t. the field parameters.
/// Replays the forward sample positions exactly; depth carries no gradient.
pub fn march_backward<G: GradSink + ?Sized>(
    field: &VoxelField,
    occ: &OccupancyGrid,
    ray: &Ray,
    interval: (f64, f64),
    cfg: &MarchConfig,
    grad_feature: &[f64],
    grad: &mut G,
) {
    if grad_feature.iter().all(|&g| g == 0.0) {
        return;
    }
    let k = field.channels();
    let mut feature = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    // (t, sigma, g·f_i) per queried sample
    let mut samples: Vec<(f64, f64, f64)> = Vec::new();
    march_into(field, occ, ray, interval, cfg, &mut feature, &mut scratch, |_, t, sigma, f| {
        let gf: f64 = f.iter().zip(grad_feature).map(|(a, b)| a * b).sum();
        samples.push((t, sigma, gf));
    });
    let total: f64 = feature.iter().zip(grad_feature).map(|(a, b)| a * b).sum();

    let delta = cfg.step;
    let mut transmittance = 1.0;
    let mut prefix = 0.0;
    let mut scaled = vec![0.0; k];
    for &(t, sigma, gf) in &samples {
        let alpha = 1.0 - (-sigma * delta).exp();
        let w = transmittance * alpha;
        let t_next = transmittance * (1.0 - alpha);
        prefix += w * gf;
        // ∂f_r/∂σ_i = δ (T_{i+1} f_i − Σ_{j>i} w_j f_j)
        let grad_sigma = delta * (t_next * gf - (total - prefix));
        for (s, &g) in scaled.iter_mut().zip(grad_feature) {
            *s = w * g;
        }
        field.query_backward(&ray.at(t), grad_sigma, &scaled, grad);
        transmittance = t_next;
    }
}

/// Per-pixel sampling intervals in ray-parameter units. `None` means full range.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalMap {
    pub width: usize,
    pub height: usize,
    pub intervals: Vec<Option<(f64, f64)>>,
}

impl IntervalMap {
    pub fn full(width: usize, height: usize) -> Self {
        IntervalMap {
            width,
            height,
            intervals: vec![None; width * height],
        }
    }

    pub fn guided_fraction(&self) -> f64 {
        if self.intervals.is_empty() {
            return 0.0;
        }
        self.intervals.iter().filter(|i| i.is_some()).count() as f64 / self.intervals.len() as f64
    }

    pub fn resolve(&self, pixel: usize, range: &DepthRange) -> (f64, f64) {
        self.intervals[pixel].unwrap_or((range.near, range.far))
    }
}

/// Low-resolution rendered frame: features (row-major, `K` per pixel), z-depth and opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub channels: usize,
    pub features: Vec<f64>,
    /// Camera-space z of the opacity-normalized expected depth; 0 where opacity is 0.
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub samples_taken: u64,
}

impl FeatureFrame {
    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    pub fn pixel_feature(&self, pixel: usize) -> &[f64] {
        &self.features[pixel * self.channels..(pixel + 1) * self.channels]
    }

    pub fn samples_per_ray(&self) -> f64 {
        self.samples_taken as f64 / self.opacity.len().max(1) as f64
    }
}

fn pixel_ray(intr: &CameraIntrinsics, pose: &Pose, pixel: usize, range: &DepthRange) -> Ray {
    let w = intr.width as usize;
    generate_ray(intr, pose, PixelCoord::center(pixel % w, pixel / w), range.near, range.far)
}

/// Marches one ray per low-res pixel center.
pub fn render_frame(
    field: &VoxelField,
    occ: &OccupancyGrid,
    pose: &Pose,
    intr: &CameraIntrinsics,
    intervals: &IntervalMap,
    range: &DepthRange,
    cfg: &MarchConfig,
) -> FeatureFrame {
    let k = field.channels();
    let n = intr.pixel_count();
    assert_eq!(intervals.intervals.len(), n, "interval map does not match the image");
    let chunks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, u64)> = (0..n.div_ceil(PIXEL_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * PIXEL_CHUNK;
            let hi = (lo + PIXEL_CHUNK).min(n);
            let mut features = vec![0.0; (hi - lo) * k];
            let mut depth = Vec::with_capacity(hi - lo);
            let mut opacity = Vec::with_capacity(hi - lo);
            let mut scratch = vec![0.0; k];
            let mut samples = 0u64;
            for (p, feat) in (lo..hi).zip(features.chunks_mut(k)) {
                let ray = pixel_ray(intr, pose, p, range);
                let interval = intervals.resolve(p, range);
                let s = march_into(field, occ, &ray, interval, cfg, feat, &mut scratch, |_, _, _, _| {});
                let alpha = 1.0 - s.transmittance;
                samples += s.samples as u64;
                let z = if alpha > 0.0 {
                    let cos = pose.rotation.row(2).transpose().dot(&ray.direction);
                    s.depth / alpha * cos
                } else {
                    0.0
                };
                depth.push(z);
                opacity.push(alpha);
            }
            (features, depth, opacity, samples)
        })
        .collect();
    let mut frame = FeatureFrame {
        intrinsics: *intr,
        pose: *pose,
        channels: k,
        features: Vec::with_capacity(n * k),
        depth: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
        samples_taken: 0,
    };
    for (f, d, o, s) in chunks {
        frame.features.extend(f);
        frame.depth.extend(d);
        frame.opacity.extend(o);
        frame.samples_taken += s;
    }
    frame
}

/// Backward of [`render_frame`] for a per-pixel feature gradient (`K` per pixel).
pub fn render_frame_backward(
    field: &VoxelField,
    occ: &OccupancyGrid,
    pose: &Pose,
    intr: &CameraIntrinsics,
    intervals: &IntervalMap,
    range: &DepthRange,
    cfg: &MarchConfig,
    grad_features: &[f64],
    grad: &mut [f64],
) {
    let k = field.channels();
    let n = intr.pixel_count();
    assert_eq!(grad_features.len(), n * k);
    let parts: Vec<SparseGrad> = (0..n.div_ceil(PIXEL_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut sparse = SparseGrad::default();
            let lo = chunk * PIXEL_CHUNK;
            for p in lo..(lo + PIXEL_CHUNK).min(n) {
                let g = &grad_features[p * k..(p + 1) * k];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let ray = pixel_ray(intr, pose, p, range);
                march_backward(field, occ, &ray, intervals.resolve(p, range), cfg, g, &mut sparse);
            }
            sparse
        })
        .collect();
    for part in &parts {
        part.merge_into(grad);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Half-width ε of the sampling interval, world units.
    pub epsilon: f64,
    /// Minimum opacity for a preceding pixel's depth to be trusted.
    pub opacity_valid: f64,
}

/// Reprojects the preceding frame's depth into the current low-res view and turns it
/// into per-pixel sampling intervals `[d − ε, d + ε]`, nearest depth winning.
pub fn build_intervals(
    prev: &FeatureFrame,
    cur_pose: &Pose,
    cur_intr: &CameraIntrinsics,
    guidance: &GuidanceConfig,
    range: &DepthRange,
) -> IntervalMap {
    let (w, h) = (cur_intr.width as usize, cur_intr.height as usize);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let pw = prev.width();
    for (p, (&z, &a)) in prev.depth.iter().zip(&prev.opacity).enumerate() {
        if a < guidance.opacity_valid || z <= 0.0 {
            continue;
        }
        let point = unproject(&prev.intrinsics, &prev.pose, PixelCoord::center(p % pw, p / pw), z);
        let Some((px, d)) = project(cur_intr, cur_pose, &point) else {
            continue;
        };
        let (i, j) = px.floor();
        if !cur_intr.contains_index(i, j) {
            continue;
        }
        let idx = j as usize * w + i as usize;
        if d < zbuf[idx] {
            zbuf[idx] = d;
        }
    }
    let intervals = zbuf
        .iter()
        .enumerate()
        .map(|(idx, &z)| {
            if !z.is_finite() {
                return None;
            }
            // z-depth to ray parameter along this pixel's center ray
            let t = z * cur_intr.camera_ray(PixelCoord::center(idx % w, idx / w)).norm();
            let lo = (t - guidance.epsilon).max(range.near);
            let hi = (t + guidance.epsilon).min(range.far);
            (lo < hi).then_some((lo, hi))
        })
        .collect();
    IntervalMap {
        width: w,
        height: h,
        intervals,
    }
}
