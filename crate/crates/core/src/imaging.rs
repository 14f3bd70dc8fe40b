//! RGB images and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::DatasetError;
use crate::neural_render::Tensor;

/// Row-major RGB image, three `f64` values per pixel, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRGB {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        ImageRGB {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    /// Takes the first three channels of a planar tensor.
    pub fn from_planar(t: &Tensor) -> Self {
        let n = t.width * t.height;
        let mut img = ImageRGB::new(t.width, t.height);
        for c in 0..3.min(t.channels) {
            for (p, &v) in t.plane(c).iter().enumerate() {
                img.data[p * 3 + c] = v;
            }
        }
        debug_assert_eq!(img.data.len(), n * 3);
        img
    }

    /// Takes the first three channels of a row-major map with `channels` per pixel,
    /// clamped to `[0, 1]`.
    pub fn from_feature_map(map: &[f64], width: usize, height: usize, channels: usize) -> Self {
        let mut img = ImageRGB::new(width, height);
        for p in 0..width * height {
            for c in 0..3 {
                img.data[p * 3 + c] = map[p * channels + c].clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> ImageRGB {
        let mut out = ImageRGB::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        ImageRGB {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        let buf: RgbImage =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
                .expect("buffer matches image size");
        buf.save(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Loads a PNG; an alpha channel is composited over black.
    pub fn load_png(path: &Path) -> Result<Self, DatasetError> {
        if !path.exists() {
            return Err(DatasetError::Missing(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgba = img.to_rgba32f();
        let (w, h) = rgba.dimensions();
        let mut out = ImageRGB::new(w as usize, h as usize);
        for (p, px) in rgba.pixels().enumerate() {
            let a = px[3] as f64;
            for c in 0..3 {
                out.data[p * 3 + c] = px[c] as f64 * a;
            }
        }
        Ok(out)
    }

    /// Encodes as an in-memory PNG.
    pub fn encode_png(&self) -> Vec<u8> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
                .expect("buffer matches image size");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }
}
