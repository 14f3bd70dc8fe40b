//! Procedural analytic scenes, the brute-force oracle renderer, datasets on disk and
//! checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CheckpointError, DatasetError};
use crate::field::{rebuild_occupancy, softplus_inv, OccupancyGrid, VoxelField};
use crate::geometry::{generate_ray, Aabb, CameraIntrinsics, PixelCoord, Pose, Vec3};
use crate::imaging::ImageRGB;
use crate::neural_render::{ConvRenderer, LayerPlan};
use crate::pipeline::PipelineConfig;
use crate::trainer::{Dataset, Split, View};
use crate::volren::DepthRange;

/// Raw density assigned to empty voxels when baking.
pub const BAKE_RAW_FLOOR: f64 = -15.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - Vec3::from(center)).norm_squared() <= radius * radius,
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Interior density σ₀ in 1/world-unit.
    pub sigma: f64,
    pub color: [f64; 3],
    /// Optional stripe frequency (radians per world unit) modulating the color along x+y+z.
    #[serde(default)]
    pub stripes: Option<f64>,
}

impl Primitive {
    fn color_at(&self, p: &Vec3) -> [f64; 3] {
        match self.stripes {
            None => self.color,
            Some(freq) => {
                let m = 0.6 + 0.4 * (freq * (p.x + p.y + p.z)).sin();
                self.color.map(|c| c * m)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Spheres,
    Boxes,
    Mixed,
    OpaqueSphere,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Preset> {
        match name {
            "spheres" => Some(Preset::Spheres),
            "boxes" => Some(Preset::Boxes),
            "mixed" => Some(Preset::Mixed),
            "opaque-sphere" => Some(Preset::OpaqueSphere),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Spheres => "spheres",
            Preset::Boxes => "boxes",
            Preset::Mixed => "mixed",
            Preset::OpaqueSphere => "opaque-sphere",
        }
    }
}

/// Primitives in vacuum. Where primitives overlap the first listed one wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub bounds: Aabb,
}

impl AnalyticScene {
    pub fn preset(p: Preset) -> Self {
        let sphere = |c: [f64; 3], r: f64, sigma: f64, color: [f64; 3]| Primitive {
            shape: Shape::Sphere { center: c, radius: r },
            sigma,
            color,
            stripes: None,
        };
        let cube = |min: [f64; 3], max: [f64; 3], sigma: f64, color: [f64; 3]| Primitive {
            shape: Shape::Box { min, max },
            sigma,
            color,
            stripes: None,
        };
        let primitives = match p {
            Preset::Spheres => vec![
                sphere([0.0, 0.0, 0.0], 0.5, 40.0, [0.9, 0.3, 0.2]),
                sphere([0.45, 0.45, 0.2], 0.3, 40.0, [0.2, 0.7, 0.3]),
                sphere([-0.5, 0.3, -0.3], 0.35, 40.0, [0.25, 0.35, 0.9]),
            ],
            Preset::Boxes => vec![
                cube([-0.6, -0.6, -0.6], [0.1, 0.1, 0.0], 40.0, [0.85, 0.75, 0.2]),
                cube([0.0, 0.1, -0.5], [0.55, 0.6, 0.5], 40.0, [0.3, 0.5, 0.85]),
            ],
            Preset::Mixed => vec![
                sphere([0.1, -0.1, 0.25], 0.45, 40.0, [0.9, 0.35, 0.25]),
                Primitive {
                    stripes: Some(14.0),
                    ..cube([-0.7, -0.2, -0.7], [0.0, 0.6, -0.1], 40.0, [0.3, 0.8, 0.45])
                },
                sphere([0.55, 0.45, -0.35], 0.28, 40.0, [0.3, 0.4, 0.95]),
                cube([0.3, -0.75, -0.7], [0.7, -0.35, -0.3], 8.0, [0.95, 0.9, 0.4]),
            ],
            Preset::OpaqueSphere => vec![sphere([0.0, 0.0, 0.0], 0.6, 60.0, [0.8, 0.45, 0.2])],
        };
        AnalyticScene {
            primitives,
            bounds: Aabb::cube(1.0),
        }
    }

    /// Density and color at `p`; vacuum outside primitives and bounds.
    pub fn sample(&self, p: &Vec3) -> (f64, [f64; 3]) {
        if !self.bounds.contains(p) {
            return (0.0, [0.0; 3]);
        }
        self.primitives
            .iter()
            .find(|prim| prim.shape.contains(p))
            .map_or((0.0, [0.0; 3]), |prim| (prim.sigma, prim.color_at(p)))
    }
}

/// Oracle output: color, z-depth of the opacity-normalized expected depth, opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRender {
    pub image: ImageRGB,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Brute-force quadrature with analytic density and color: midpoint samples every
/// `fine_step` over the full depth range, stopping only once transmittance is below 1e-6.
pub fn oracle_render(
    scene: &AnalyticScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
    fine_step: f64,
    range: &DepthRange,
) -> OracleRender {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let pixels: Vec<([f64; 3], f64, f64)> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let ray = generate_ray(intr, pose, PixelCoord::center(p % w, p / w), range.near, range.far);
            let mut transmittance = 1.0;
            let mut color = [0.0; 3];
            let mut depth = 0.0;
            let mut i = 0usize;
            loop {
                let t = range.near + (i as f64 + 0.5) * fine_step;
                if t >= range.far || transmittance < 1e-6 {
                    break;
                }
                i += 1;
                let (sigma, c) = scene.sample(&ray.at(t));
                if sigma == 0.0 {
                    continue;
                }
                let alpha = 1.0 - (-sigma * fine_step).exp();
                let wgt = transmittance * alpha;
                for k in 0..3 {
                    color[k] += wgt * c[k];
                }
                depth += wgt * t;
                transmittance *= 1.0 - alpha;
            }
            let opacity = 1.0 - transmittance;
            let z = if opacity > 0.0 {
                depth / opacity * pose.rotation.row(2).transpose().dot(&ray.direction)
            } else {
                0.0
            };
            (color, z, opacity)
        })
        .collect();
    let mut out = OracleRender {
        image: ImageRGB::new(w, h),
        depth: Vec::with_capacity(w * h),
        opacity: Vec::with_capacity(w * h),
    };
    for (p, (c, z, a)) in pixels.into_iter().enumerate() {
        out.image.data[p * 3..p * 3 + 3].copy_from_slice(&c);
        out.depth.push(z);
        out.opacity.push(a);
    }
    out
}

/// Samples the scene at voxel centers: raw density `softplus⁻¹(σ₀)` (floored at
/// [`BAKE_RAW_FLOOR`]), channels 0–2 the color, the rest zero. Vacuum voxels next to
/// matter take the color of an occupied neighbor so surface samples are not darkened
/// by interpolating toward black.
pub fn bake(scene: &AnalyticScene, resolution: [usize; 3], bounds: Aabb, channels: usize) -> VoxelField {
    assert!(channels >= 3, "baking needs at least 3 channels");
    let mut field = VoxelField::filled(resolution, bounds, channels, BAKE_RAW_FLOOR as f32, 0.0)
        .expect("valid bake resolution");
    let [nx, ny, nz] = resolution;
    let mut samples = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                samples.push(scene.sample(&field.voxel_center(i, j, k)));
            }
        }
    }
    let mut feat = vec![0.0f32; channels];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = field.voxel_index(i, j, k);
                let (sigma, mut color) = samples[v];
                let raw = if sigma > 0.0 {
                    softplus_inv(sigma).max(BAKE_RAW_FLOOR)
                } else {
                    BAKE_RAW_FLOOR
                };
                if sigma == 0.0 {
                    if let Some(c) = occupied_neighbor(&samples, resolution, [i, j, k]) {
                        color = c;
                    }
                }
                for c in 0..3 {
                    feat[c] = color[c] as f32;
                }
                field.set_voxel(v, raw as f32, &feat);
            }
        }
    }
    field
}

/// Color of the first occupied voxel in the 3×3×3 neighborhood, scanning in index order.
fn occupied_neighbor(samples: &[(f64, [f64; 3])], res: [usize; 3], at: [usize; 3]) -> Option<[f64; 3]> {
    let range = |a: usize| at[a].saturating_sub(1)..=(at[a] + 1).min(res[a] - 1);
    for k in range(2) {
        for j in range(1) {
            for i in range(0) {
                let (sigma, color) = samples[i + res[0] * (j + res[1] * k)];
                if sigma > 0.0 {
                    return Some(color);
                }
            }
        }
    }
    None
}

/// Upper-hemisphere orbit sampling for datasets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSampler {
    pub radius: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for OrbitSampler {
    fn default() -> Self {
        OrbitSampler {
            radius: 3.0,
            min_elevation_deg: 5.0,
            max_elevation_deg: 70.0,
        }
    }
}

/// Oracle-rendered views from random upper-hemisphere poses looking at the scene center.
pub fn make_dataset(
    scene: &AnalyticScene,
    n_views: usize,
    orbit: &OrbitSampler,
    intr: &CameraIntrinsics,
    fine_step: f64,
    range: &DepthRange,
    rng: &mut impl Rng,
) -> Dataset {
    let center = scene.bounds.center();
    let views = (0..n_views)
        .map(|_| {
            let az = rng.random_range(0.0..std::f64::consts::TAU);
            let el = rng
                .random_range(orbit.min_elevation_deg..=orbit.max_elevation_deg)
                .to_radians();
            let pose = Pose::orbit(center, orbit.radius, az, el).expect("elevation below the pole");
            View {
                image: oracle_render(scene, &pose, intr, fine_step, range).image,
                pose,
                intrinsics: *intr,
                pseudo: false,
            }
        })
        .collect();
    Dataset {
        split: Split::Train,
        views,
    }
}

#[derive(Serialize, Deserialize)]
struct TransformsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera_angle_x: Option<f64>,
    frames: Vec<TransformsFrame>,
}

#[derive(Serialize, Deserialize)]
struct TransformsFrame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Frame file name used for frame `i` of a saved dataset or trajectory render.
pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

/// Writes `transforms.json` plus one PNG per view; matrices are camera-to-world in the
/// OpenGL convention.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let intr = data.views.first().map(|v| v.intrinsics);
    let mut frames = Vec::with_capacity(data.len());
    for (i, v) in data.views.iter().enumerate() {
        let name = frame_name(i);
        v.image.save_png(&dir.join(&name))?;
        let r = v.pose.to_c2w_gl_rows();
        let mut m = [[0.0; 4]; 4];
        for (row, chunk) in m.iter_mut().zip(r.chunks(4)) {
            row.copy_from_slice(chunk);
        }
        frames.push(TransformsFrame {
            file_path: format!("./{name}"),
            transform_matrix: m,
        });
    }
    let file = TransformsFile {
        fl_x: intr.map(|k| k.fx),
        fl_y: intr.map(|k| k.fy),
        cx: intr.map(|k| k.cx),
        cy: intr.map(|k| k.cy),
        w: intr.map(|k| k.width),
        h: intr.map(|k| k.height),
        camera_angle_x: None,
        frames,
    };
    let path = dir.join("transforms.json");
    let text = serde_json::to_string_pretty(&file).expect("serializable");
    fs::write(&path, text).map_err(io_err(&path))
}

fn resolve_image_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Loads `transforms.json` and its images. Intrinsics come from `fl_x`/`fl_y`/`cx`/`cy`
/// or from `camera_angle_x`; missing sizes are taken from the first image.
pub fn load_posed_image_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let path = dir.join("transforms.json");
    if !path.exists() {
        return Err(DatasetError::Missing(path));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let malformed = |msg: String| DatasetError::Malformed {
        path: path.clone(),
        msg,
    };
    let file: TransformsFile = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let mut images = Vec::with_capacity(file.frames.len());
    for f in &file.frames {
        let p = resolve_image_path(dir, &f.file_path);
        images.push((ImageRGB::load_png(&p)?, p));
    }
    let (w, h) = match (file.w, file.h, images.first()) {
        (Some(w), Some(h), _) => (w, h),
        (_, _, Some((img, _))) => (img.width as u32, img.height as u32),
        _ => return Err(malformed("no frames and no image size".into())),
    };
    let intr = match (file.fl_x, file.camera_angle_x) {
        (Some(fx), _) => CameraIntrinsics::new(
            fx,
            file.fl_y.unwrap_or(fx),
            file.cx.unwrap_or(w as f64 / 2.0),
            file.cy.unwrap_or(h as f64 / 2.0),
            w,
            h,
        ),
        (None, Some(angle)) => {
            let fx = w as f64 / (2.0 * (angle / 2.0).tan());
            CameraIntrinsics::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h)
        }
        (None, None) => return Err(malformed("need fl_x or camera_angle_x".into())),
    }?;
    let mut views = Vec::with_capacity(images.len());
    for (f, (image, p)) in file.frames.iter().zip(images) {
        if image.width as u32 != w || image.height as u32 != h {
            return Err(DatasetError::SizeMismatch {
                path: p,
                got_w: image.width as u32,
                got_h: image.height as u32,
                want_w: w,
                want_h: h,
            });
        }
        let rows: Vec<f64> = f.transform_matrix.iter().flatten().copied().collect();
        let pose = Pose::from_c2w_gl_rows(&rows, 1e-3)?;
        views.push(View {
            image,
            pose,
            intrinsics: intr,
            pseudo: false,
        });
    }
    Ok(Dataset {
        split: Split::Train,
        views,
    })
}

/// Reads a trajectory file: a JSON list of 4×4 camera-to-world matrices (OpenGL
/// convention), each either nested rows or 16 row-major numbers.
pub fn load_trajectory(path: &Path) -> Result<Vec<Pose>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |msg: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        msg,
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let list = value
        .as_array()
        .ok_or_else(|| malformed("expected a list of matrices".into()))?;
    list.iter()
        .enumerate()
        .map(|(i, m)| {
            let flat: Vec<f64> = match m {
                Value::Array(rows) if rows.iter().all(Value::is_array) => rows
                    .iter()
                    .flat_map(|r| r.as_array().unwrap().iter().map(Value::as_f64))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| malformed(format!("matrix {i} has non-numeric entries")))?,
                Value::Array(vals) => vals
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| malformed(format!("matrix {i} has non-numeric entries")))?,
                _ => return Err(malformed(format!("entry {i} is not a matrix"))),
            };
            Ok(Pose::from_c2w_gl_rows(&flat, 1e-3)?)
        })
        .collect()
}

pub fn save_trajectory(path: &Path, poses: &[Pose]) -> Result<(), DatasetError> {
    let mats: Vec<Vec<Vec<f64>>> = poses
        .iter()
        .map(|p| p.to_c2w_gl_rows().chunks(4).map(|r| r.to_vec()).collect())
        .collect();
    let text = serde_json::to_string_pretty(&mats).expect("serializable");
    fs::write(path, text).map_err(io_err(path))
}

/// Smooth orbit at fixed radius and elevation, `n` poses from `start_deg` stepping by
/// `step_deg` of azimuth.
pub fn orbit_trajectory(center: Vec3, radius: f64, elevation_deg: f64, start_deg: f64, step_deg: f64, n: usize) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let az = (start_deg + step_deg * i as f64).to_radians();
            Pose::orbit(center, radius, az, elevation_deg.to_radians()).expect("elevation below the pole")
        })
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "trajfield-checkpoint";

/// Trained field plus renderer and the pipeline settings they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: VoxelField,
    pub occupancy_resolution: [usize; 3],
    pub occupancy_threshold: f64,
    pub renderer: ConvRenderer,
    pub pipeline: PipelineConfig,
    /// Free-form run metadata (seed, training config).
    pub meta: Value,
}

impl Checkpoint {
    pub fn occupancy(&self) -> Result<OccupancyGrid, CheckpointError> {
        let mut occ = OccupancyGrid::new(self.occupancy_resolution, self.field.bounds(), self.occupancy_threshold);
        rebuild_occupancy(&self.field, &mut occ)?;
        Ok(occ)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    resolution: [usize; 3],
    bounds: Aabb,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct OccupancyHeader {
    resolution: [usize; 3],
    threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    /// Number of f32 values.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    field: FieldHeader,
    occupancy: OccupancyHeader,
    pipeline: PipelineConfig,
    layer_plan: LayerPlan,
    blocks: Vec<BlockHeader>,
    #[serde(default)]
    meta: Value,
}

const BLOCK_NAMES: [&str; 3] = ["field.raw_density", "field.features", "renderer.weights"];

/// Layout: u32 LE header length, JSON header, then the header's blocks in order as
/// little-endian f32.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let blocks: [&[f32]; 3] = [ck.field.raw_density(), ck.field.features(), ck.renderer.params()];
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        field: FieldHeader {
            resolution: ck.field.resolution(),
            bounds: ck.field.bounds(),
            channels: ck.field.channels(),
        },
        occupancy: OccupancyHeader {
            resolution: ck.occupancy_resolution,
            threshold: ck.occupancy_threshold,
        },
        pipeline: ck.pipeline,
        layer_plan: ck.renderer.plan().clone(),
        blocks: BLOCK_NAMES
            .iter()
            .zip(&blocks)
            .map(|(n, b)| BlockHeader {
                name: n.to_string(),
                len: b.len(),
            })
            .collect(),
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let total: usize = blocks.iter().map(|b| b.len() * 4).sum();
    let mut out = Vec::with_capacity(4 + json.len() + total);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blocks {
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hlen {
        return Err(CheckpointError::Truncated(format!(
            "header needs {hlen} bytes, file has {}",
            bytes.len() - 4
        )));
    }
    let value: Value =
        serde_json::from_slice(&bytes[4..4 + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if value.get("format").and_then(Value::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(CheckpointError::Header("not a checkpoint header".into()));
    }
    let version = value.get("version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let n = header.field.resolution.iter().product::<usize>();
    let expected = [n, n * header.field.channels, header.layer_plan.param_count()];
    if header.blocks.len() != BLOCK_NAMES.len() {
        return Err(CheckpointError::LengthMismatch(format!(
            "{} blocks declared, expected {}",
            header.blocks.len(),
            BLOCK_NAMES.len()
        )));
    }
    for ((b, name), want) in header.blocks.iter().zip(BLOCK_NAMES).zip(expected) {
        if b.name != name {
            return Err(CheckpointError::Header(format!("unexpected block {} (want {name})", b.name)));
        }
        if b.len != want {
            return Err(CheckpointError::LengthMismatch(format!(
                "block {name} declares {} values, header arithmetic gives {want}",
                b.len
            )));
        }
    }
    let body = &bytes[4 + hlen..];
    let declared: usize = expected.iter().sum::<usize>() * 4;
    if body.len() != declared {
        return Err(CheckpointError::LengthMismatch(format!(
            "blocks need {declared} bytes, file has {}",
            body.len()
        )));
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (field_params, renderer_params) = floats.split_at(expected[0] + expected[1]);
    let field = VoxelField::from_params(
        header.field.resolution,
        header.field.bounds,
        header.field.channels,
        field_params.to_vec(),
    )?;
    let renderer = ConvRenderer::from_params(header.layer_plan, renderer_params.to_vec())?;
    Ok(Checkpoint {
        field,
        occupancy_resolution: header.occupancy.resolution,
        occupancy_threshold: header.occupancy.threshold,
        renderer,
        pipeline: header.pipeline,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
