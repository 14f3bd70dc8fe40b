//! Shared fixtures for the benchmarks.

use trajfield::scene::{bake, AnalyticScene, Preset};
use trajfield::{
    orbit_trajectory, rebuild_occupancy, Aabb, CameraIntrinsics, ConvRenderer, DepthRange, LayerPlan, OccupancyGrid,
    PipelineConfig, Pose, Vec3, VoxelField,
};

/// Baked mixed scene at desk scale: 64³ grid, six channels, 96×96 target.
pub struct Fixture {
    pub field: VoxelField,
    pub occ: OccupancyGrid,
    pub renderer: ConvRenderer,
    pub pipeline: PipelineConfig,
    pub intr_high: CameraIntrinsics,
    pub intr_low: CameraIntrinsics,
    pub orbit: Vec<Pose>,
}

impl Fixture {
    pub fn new() -> Fixture {
        let bounds = Aabb::cube(1.0);
        let field = bake(&AnalyticScene::preset(Preset::Mixed), [64; 3], bounds, 6);
        let mut occ = OccupancyGrid::for_field(&field, [16; 3], 0.01).unwrap();
        rebuild_occupancy(&field, &mut occ).unwrap();
        let range = DepthRange { near: 1.2, far: 4.8 };
        let pipeline = PipelineConfig::with_range(range);
        let renderer = ConvRenderer::init(0, LayerPlan::default_for(pipeline.renderer_input_channels())).unwrap();
        let intr_high = CameraIntrinsics::from_fov_y(40.0, 96, 96).unwrap();
        let intr_low = CameraIntrinsics::from_fov_y(40.0, 24, 24).unwrap();
        Fixture {
            field,
            occ,
            renderer,
            pipeline,
            intr_high,
            intr_low,
            orbit: orbit_trajectory(Vec3::zeros(), 3.0, 30.0, 0.0, 2.0, 30),
        }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Fixture::new()
    }
}
