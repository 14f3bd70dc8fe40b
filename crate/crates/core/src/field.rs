//! Dense voxel feature field: a density channel plus `K` feature channels on a regular
//! grid, trilinearly interpolated between voxel centers.
//!
//! Parameters live in a single flat `f32` vector: `N` raw densities followed by
//! `N·K` features (voxel-major). Gradients use the same flat indexing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::FieldError;
use crate::geometry::{Aabb, Vec3};

pub const INIT_RAW_DENSITY: f32 = -2.0;
pub const INIT_FEATURE_RANGE: f32 = 0.05;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Destination for parameter gradients, addressed by flat parameter index.
pub trait GradSink {
    fn add(&mut self, index: usize, value: f64);
}

impl GradSink for [f64] {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

impl GradSink for Vec<f64> {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

/// Ordered list of gradient contributions. Merging lists in a fixed order keeps
/// accumulation bit-reproducible no matter how work was split across threads.
#[derive(Clone, Debug, Default)]
pub struct SparseGrad {
    pub entries: Vec<(u32, f64)>,
}

impl SparseGrad {
    pub fn merge_into(&self, dense: &mut [f64]) {
        for &(i, v) in &self.entries {
            dense[i as usize] += v;
        }
    }
}

impl GradSink for SparseGrad {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self.entries.push((index as u32, value));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub feature: Vec<f64>,
}

/// The eight voxels surrounding a point and their trilinear weights.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    bounds: Aabb,
    channels: usize,
    params: Vec<f32>,
}

impl VoxelField {
    /// Fresh field: near-transparent density and small random features.
    pub fn new(
        resolution: [usize; 3],
        bounds: Aabb,
        channels: usize,
        seed: u64,
    ) -> Result<Self, FieldError> {
        let mut field = Self::filled(resolution, bounds, channels, INIT_RAW_DENSITY, 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = field.voxel_count();
        for f in &mut field.params[n..] {
            *f = rng.random_range(-INIT_FEATURE_RANGE..INIT_FEATURE_RANGE);
        }
        Ok(field)
    }

    pub fn filled(
        resolution: [usize; 3],
        bounds: Aabb,
        channels: usize,
        raw_density: f32,
        feature: f32,
    ) -> Result<Self, FieldError> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(FieldError::BadResolution(resolution));
        }
        if channels == 0 {
            return Err(FieldError::NoChannels);
        }
        let n = resolution.iter().product::<usize>();
        let mut params = vec![raw_density; n * (1 + channels)];
        params[n..].fill(feature);
        Ok(VoxelField {
            resolution,
            bounds,
            channels,
            params,
        })
    }

    pub fn from_params(
        resolution: [usize; 3],
        bounds: Aabb,
        channels: usize,
        params: Vec<f32>,
    ) -> Result<Self, FieldError> {
        let mut field = Self::filled(resolution, bounds, channels, 0.0, 0.0)?;
        if params.len() != field.params.len() {
            return Err(FieldError::BadResolution(resolution));
        }
        field.params = params;
        Ok(field)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn raw_density(&self) -> &[f32] {
        &self.params[..self.voxel_count()]
    }

    pub fn features(&self) -> &[f32] {
        &self.params[self.voxel_count()..]
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    /// Flat parameter index of feature channel `c` of voxel `voxel`.
    pub fn feature_param(&self, voxel: usize, c: usize) -> usize {
        self.voxel_count() + voxel * self.channels + c
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.bounds.extent(a) / self.resolution[a] as f64)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let size = self.voxel_size();
        Vec3::new(
            self.bounds.min[0] + (i as f64 + 0.5) * size[0],
            self.bounds.min[1] + (j as f64 + 0.5) * size[1],
            self.bounds.min[2] + (k as f64 + 0.5) * size[2],
        )
    }

    pub fn set_voxel(&mut self, voxel: usize, raw_density: f32, features: &[f32]) {
        let n = self.voxel_count();
        self.params[voxel] = raw_density;
        let k = self.channels;
        self.params[n + voxel * k..n + (voxel + 1) * k].copy_from_slice(features);
    }

    /// Trilinear stencil. Points outside the bounds have none; points within half a
    /// voxel of the boundary clamp to the outermost voxel centers.
    pub fn corners(&self, x: &Vec3) -> Option<Corners> {
        if !self.bounds.contains(x) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = (x[a] - self.bounds.min[a]) / self.bounds.extent(a) * n as f64 - 0.5;
            let i0 = (g.floor().max(0.0) as usize).min(n - 2);
            base[a] = i0;
            frac[a] = (g - i0 as f64).clamp(0.0, 1.0);
        }
        let [nx, ny, _] = self.resolution;
        let mut index = [0usize; 8];
        let mut weight = [0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            index[c] = (base[0] + dx) + nx * ((base[1] + dy) + ny * (base[2] + dz));
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weight[c] = wx * wy * wz;
        }
        Some(Corners { index, weight })
    }

    /// Interpolates at `x`, writing the feature into `feature` (length `K`).
    /// Returns `(sigma, raw_density)`; zero sigma and feature outside the bounds.
    #[inline]
    pub fn sample_into(&self, x: &Vec3, feature: &mut [f64]) -> (f64, f64) {
        feature.fill(0.0);
        let Some(c) = self.corners(x) else {
            return (0.0, f64::NEG_INFINITY);
        };
        let n = self.voxel_count();
        let k = self.channels;
        let mut raw = 0.0;
        for (&idx, &w) in c.index.iter().zip(&c.weight) {
            raw += w * self.params[idx] as f64;
            let f = &self.params[n + idx * k..n + (idx + 1) * k];
            for (acc, &v) in feature.iter_mut().zip(f) {
                *acc += w * v as f64;
            }
        }
        (softplus(raw), raw)
    }

    pub fn query(&self, x: &Vec3) -> FieldSample {
        let mut feature = vec![0.0; self.channels];
        let (sigma, _) = self.sample_into(x, &mut feature);
        FieldSample { sigma, feature }
    }

    /// Accumulates `∂loss/∂params` given `∂loss/∂sigma` and `∂loss/∂feature` at `x`.
    pub fn query_backward<G: GradSink + ?Sized>(
        &self,
        x: &Vec3,
        grad_sigma: f64,
        grad_feature: &[f64],
        grad: &mut G,
    ) {
        let Some(c) = self.corners(x) else {
            return;
        };
        let n = self.voxel_count();
        let k = self.channels;
        if grad_sigma != 0.0 {
            let raw: f64 = c
                .index
                .iter()
                .zip(&c.weight)
                .map(|(&i, &w)| w * self.params[i] as f64)
                .sum();
            let grad_raw = grad_sigma * sigmoid(raw);
            for (&idx, &w) in c.index.iter().zip(&c.weight) {
                if w != 0.0 {
                    grad.add(idx, w * grad_raw);
                }
            }
        }
        if grad_feature.iter().any(|&g| g != 0.0) {
            for (&idx, &w) in c.index.iter().zip(&c.weight) {
                if w == 0.0 {
                    continue;
                }
                for (ch, &g) in grad_feature.iter().enumerate() {
                    if g != 0.0 {
                        grad.add(n + idx * k + ch, w * g);
                    }
                }
            }
        }
    }
}

/// Coarse bitmask of cells that may contain density, used to skip empty space.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    threshold: f64,
    bits: Vec<bool>,
}

impl OccupancyGrid {
    /// All cells occupied: no skipping until the first rebuild.
    pub fn new(resolution: [usize; 3], bounds: Aabb, threshold: f64) -> Self {
        OccupancyGrid {
            resolution,
            bounds,
            threshold,
            bits: vec![true; resolution.iter().product()],
        }
    }

    /// Builds and immediately fills from `field`.
    pub fn for_field(
        field: &VoxelField,
        resolution: [usize; 3],
        threshold: f64,
    ) -> Result<Self, FieldError> {
        let mut occ = OccupancyGrid::new(resolution, field.bounds(), threshold);
        rebuild_occupancy(field, &mut occ)?;
        Ok(occ)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    #[inline]
    pub fn is_occupied(&self, x: &Vec3) -> bool {
        if !self.bounds.contains(x) {
            return false;
        }
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = (x[a] - self.bounds.min[a]) / self.bounds.extent(a) * n as f64;
            idx[a] = (g.max(0.0) as usize).min(n - 1);
        }
        self.bits[self.cell_index(idx[0], idx[1], idx[2])]
    }
}

/// Marks each coarse cell occupied iff the largest activated density among the fine
/// voxels it encloses reaches the grid's threshold.
pub fn rebuild_occupancy(field: &VoxelField, occ: &mut OccupancyGrid) -> Result<(), FieldError> {
    let fine = field.resolution();
    let coarse = occ.resolution;
    if (0..3).any(|a| coarse[a] == 0 || !fine[a].is_multiple_of(coarse[a])) {
        return Err(FieldError::IndivisibleOccupancy { fine, coarse });
    }
    occ.bounds = field.bounds();
    let ratio = [0, 1, 2].map(|a| fine[a] / coarse[a]);
    // softplus is monotone, so compare raw values against the inverse threshold.
    let raw = field.raw_density();
    let mut max_raw = vec![f32::NEG_INFINITY; occ.bits.len()];
    for k in 0..fine[2] {
        for j in 0..fine[1] {
            for i in 0..fine[0] {
                let cell = occ.cell_index(i / ratio[0], j / ratio[1], k / ratio[2]);
                let v = raw[field.voxel_index(i, j, k)];
                if v > max_raw[cell] {
                    max_raw[cell] = v;
                }
            }
        }
    }
    for (bit, &m) in occ.bits.iter_mut().zip(&max_raw) {
        *bit = softplus(m as f64) >= occ.threshold;
    }
    Ok(())
}
