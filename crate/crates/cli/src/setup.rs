//! Scene and model defaults shared by the commands.

use trajfield::{Aabb, CameraIntrinsics, DepthRange, Pose};

pub const BOUND: f64 = 1.0;
pub const GRID: usize = 64;
pub const OCCUPANCY_GRID: usize = 16;
pub const OCCUPANCY_THRESHOLD: f64 = 0.01;
pub const FOV_Y_DEG: f64 = 40.0;
pub const ORACLE_STEP: f64 = 0.002;
pub const MIN_NEAR: f64 = 0.05;
/// Samples per ray across the full depth range.
pub const STEPS_PER_RANGE: f64 = 256.0;
/// Held-out orbit written next to a generated dataset.
pub const ORBIT_FRAMES: usize = 30;
pub const ORBIT_ELEVATION_DEG: f64 = 30.0;
pub const ORBIT_STEP_DEG: f64 = 2.0;

pub fn bounds() -> Aabb {
    Aabb::cube(BOUND)
}

pub fn intrinsics(res: u32) -> anyhow::Result<CameraIntrinsics> {
    Ok(CameraIntrinsics::from_fov_y(FOV_Y_DEG, res, res)?)
}

pub fn depth_range<'a>(poses: impl IntoIterator<Item = &'a Pose>) -> anyhow::Result<DepthRange> {
    DepthRange::enclosing(&bounds(), poses.into_iter().map(Pose::center), MIN_NEAR)
        .ok_or_else(|| anyhow::anyhow!("no camera poses"))
}
