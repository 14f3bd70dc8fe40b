//! Wire format shared by the frame server and its clients.
//!
//! Binary frames carry a 16-byte little-endian header followed by the payload:
//! `u32 magic, u32 frame_id, u16 width, u16 height, u8 format, 3 pad bytes`.
//! Text messages are JSON objects tagged by `"type"`.

use serde::{Deserialize, Serialize};

use crate::error::ProtocolError;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::imaging::ImageRGB;
use crate::pipeline::FrameStats;

pub const FRAME_MAGIC: u32 = 0x5352_4E46;
pub const FRAME_HEADER_LEN: usize = 16;
/// Orthonormality tolerance for client poses.
pub const POSE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Rgb8 = 0,
    Png = 1,
}

impl FrameFormat {
    pub fn from_byte(b: u8) -> Result<Self, ProtocolError> {
        match b {
            0 => Ok(FrameFormat::Rgb8),
            1 => Ok(FrameFormat::Png),
            other => Err(ProtocolError::UnknownFormat(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub frame_id: u32,
    pub width: u16,
    pub height: u16,
    pub format: FrameFormat,
}

impl FrameHeader {
    pub fn to_bytes(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut b = [0u8; FRAME_HEADER_LEN];
        b[0..4].copy_from_slice(&FRAME_MAGIC.to_le_bytes());
        b[4..8].copy_from_slice(&self.frame_id.to_le_bytes());
        b[8..10].copy_from_slice(&self.width.to_le_bytes());
        b[10..12].copy_from_slice(&self.height.to_le_bytes());
        b[12] = self.format as u8;
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(ProtocolError::ShortFrame(bytes.len()));
        }
        let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != FRAME_MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        Ok(FrameHeader {
            frame_id: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            width: u16::from_le_bytes(bytes[8..10].try_into().unwrap()),
            height: u16::from_le_bytes(bytes[10..12].try_into().unwrap()),
            format: FrameFormat::from_byte(bytes[12])?,
        })
    }
}

/// Header plus payload: raw row-major RGB8 or a PNG file.
pub fn encode_frame(frame_id: u32, image: &ImageRGB, format: FrameFormat) -> Result<Vec<u8>, ProtocolError> {
    let (Ok(width), Ok(height)) = (u16::try_from(image.width), u16::try_from(image.height)) else {
        return Err(ProtocolError::FrameTooLarge(image.width, image.height));
    };
    let header = FrameHeader {
        frame_id,
        width,
        height,
        format,
    };
    let payload = match format {
        FrameFormat::Rgb8 => image.to_rgb8(),
        FrameFormat::Png => image.encode_png(),
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes a raw RGB8 frame.
pub fn decode_rgb8_frame(bytes: &[u8]) -> Result<(FrameHeader, ImageRGB), ProtocolError> {
    let h = FrameHeader::parse(bytes)?;
    if h.format != FrameFormat::Rgb8 {
        return Err(ProtocolError::Malformed("not an RGB8 frame".into()));
    }
    let (w, ht) = (h.width as usize, h.height as usize);
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() != w * ht * 3 {
        return Err(ProtocolError::ShortFrame(bytes.len()));
    }
    Ok((h, ImageRGB::from_rgb8(w, ht, payload)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Pose {
        /// Camera-to-world, row-major, OpenGL camera axes.
        m: Vec<f64>,
        fov_y: f64,
    },
    Config {
        #[serde(default)]
        use_guidance: Option<bool>,
        #[serde(default)]
        use_nn: Option<bool>,
        #[serde(default)]
        reset: Option<bool>,
    },
    Resize {
        w: u32,
        h: u32,
    },
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }
}

/// Converts a client pose message into a world-to-camera pose and intrinsics.
pub fn client_camera(m: &[f64], fov_y: f64, width: u32, height: u32) -> Result<(Pose, CameraIntrinsics), ProtocolError> {
    if !(fov_y > 0.0 && fov_y < 180.0) {
        return Err(ProtocolError::Malformed(format!("fov_y {fov_y} out of range")));
    }
    let pose = Pose::from_c2w_gl_rows(m, POSE_TOLERANCE)?;
    let intr = CameraIntrinsics::from_fov_y(fov_y, width, height)?;
    Ok((pose, intr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsMessage {
    pub frame_id: u32,
    pub fps: f64,
    pub samples_per_ray: f64,
    pub guided_fraction: f64,
    pub ms_volume: f64,
    pub ms_warp: f64,
    pub ms_nn: f64,
    pub ms_total: f64,
    pub buffer_len: usize,
    /// 1-based index of the rendered pose among all pose messages received.
    pub pose_seq: u64,
}

impl StatsMessage {
    pub fn from_stats(frame_id: u32, pose_seq: u64, fps: f64, stats: &FrameStats, buffer_len: usize) -> Self {
        StatsMessage {
            frame_id,
            pose_seq,
            fps,
            samples_per_ray: stats.samples_per_ray_mean,
            guided_fraction: stats.guided_pixel_fraction,
            ms_volume: stats.ms_volume,
            ms_warp: stats.ms_warp,
            ms_nn: stats.ms_neural,
            ms_total: stats.ms_total,
            buffer_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerText {
    Stats(StatsMessage),
    Error { message: String },
}

impl ServerText {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}
