use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (max |RᵀR − I| = {0:e})")]
    NotARotation(f64),
    #[error("expected 16 matrix entries, got {0}")]
    BadMatrix(usize),
    #[error("scale factor {0} must be positive and finite")]
    InvalidScale(f64),
    #[error("scaling a {width}x{height} image by {scale} gives a non-integral size")]
    NonIntegralSize { scale: f64, width: u32, height: u32 },
    #[error("look-at eye, target and up are degenerate")]
    DegenerateLookAt,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("grid resolution must be at least 2 per axis, got {0:?}")]
    BadResolution([usize; 3]),
    #[error("occupancy resolution {coarse:?} does not divide field resolution {fine:?}")]
    IndivisibleOccupancy { fine: [usize; 3], coarse: [usize; 3] },
    #[error("feature channel count must be at least 1")]
    NoChannels,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("input has {got} channels, renderer expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial size {width}x{height} must be divisible by {divisor}")]
    BadSize {
        width: usize,
        height: usize,
        divisor: usize,
    },
    #[error("invalid layer plan: {0}")]
    BadPlan(String),
    #[error("parameter vector has {got} values, plan needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("image size {width}x{height} incompatible with downsample factor {scale} (need multiples of {divisor})")]
    Size {
        width: u32,
        height: u32,
        scale: u32,
        divisor: u32,
    },
    #[error("field has {field} feature channels, pipeline configured for {config}")]
    Channels { field: usize, config: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("image {0}x{1} is smaller than the {2}x{2} SSIM window")]
    TooSmall(usize, usize, usize),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    Missing(PathBuf),
    #[error("malformed transforms file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("image {path} is {got_w}x{got_h}, intrinsics say {want_w}x{want_h}")]
    SizeMismatch {
        path: PathBuf,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("block length disagreement: {0}")]
    LengthMismatch(String),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has no training views")]
    EmptyDataset,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("pose rejected: {0}")]
    BadPose(#[from] GeometryError),
    #[error("frame too short: {0} bytes")]
    ShortFrame(usize),
    #[error("bad frame magic {0:#010x}")]
    BadMagic(u32),
    #[error("unknown frame format {0}")]
    UnknownFormat(u8),
    #[error("frame size {0}x{1} does not fit the header")]
    FrameTooLarge(usize, usize),
}
