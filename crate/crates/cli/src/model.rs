use std::path::Path;

use anyhow::Context;
use trajfield::{
    load_checkpoint, CameraIntrinsics, Checkpoint, ConvRenderer, OccupancyGrid, Pipeline, PipelineConfig, VoxelField,
};

/// A checkpoint ready for rendering. Read-only once loaded.
pub struct Model {
    pub field: VoxelField,
    pub occ: OccupancyGrid,
    pub renderer: ConvRenderer,
    pub pipeline: PipelineConfig,
    /// Target camera the model was trained for.
    pub intrinsics: CameraIntrinsics,
}

impl Model {
    pub fn load(path: &Path) -> anyhow::Result<Model> {
        let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Model::from_checkpoint(ck)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> anyhow::Result<Model> {
        let occ = ck.occupancy()?;
        let intrinsics: CameraIntrinsics = serde_json::from_value(
            ck.meta
                .get("intrinsics")
                .cloned()
                .context("checkpoint metadata lacks target intrinsics")?,
        )?;
        Ok(Model {
            field: ck.field,
            occ,
            renderer: ck.renderer,
            pipeline: ck.pipeline,
            intrinsics,
        })
    }

    pub fn pipeline(&self, use_guidance: bool, use_nn: bool) -> anyhow::Result<Pipeline> {
        let mut p = Pipeline::new(self.pipeline)?;
        p.set_use_guidance(use_guidance);
        p.set_use_neural_renderer(use_nn);
        Ok(p)
    }
}
