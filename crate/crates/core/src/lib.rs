//! Trajectory-guided low-resolution volume rendering with neural upsampling.

pub mod error;
pub mod field;
pub mod geometry;
pub mod imaging;
pub mod neural_render;
pub mod pipeline;
pub mod protocol;
pub mod reproject;
pub mod scene;
pub mod trainer;
pub mod volren;

pub use error::*;
pub use field::{rebuild_occupancy, FieldSample, OccupancyGrid, VoxelField};
pub use geometry::{
    generate_ray, project, scale_intrinsics, unproject, Aabb, CameraIntrinsics, PixelCoord, Pose, Ray, Vec3,
};
pub use imaging::ImageRGB;
pub use neural_render::{ConvRenderer, LayerPlan, Tensor};
pub use pipeline::{FrameStats, Pipeline, PipelineConfig, RenderBuffer};
pub use reproject::{upsample, warp_to_highres, WarpedFeatureMap};
pub use volren::{
    build_intervals, march, march_trace, render_frame, DepthRange, FeatureFrame, GuidanceConfig, IntervalMap, MarchConfig,
    RayResult, TraceSample,
};
pub use protocol::{
    client_camera, decode_rgb8_frame, encode_frame, ClientMessage, FrameFormat, FrameHeader, ServerText, StatsMessage,
};
pub use scene::{
    bake, load_checkpoint, load_posed_image_dataset, load_trajectory, make_dataset, oracle_render, orbit_trajectory,
    save_checkpoint, save_dataset, save_trajectory, AnalyticScene, Checkpoint, OrbitSampler, Preset,
};
pub use trainer::metrics::{psnr, ssim};
pub use trainer::{
    distill, joint_train, pretrain, render_rgb, train_checkpoint, Dataset, ModelSpec, LogRecord, Split, Stage, TrainConfig, View, ViewingZone,
};
