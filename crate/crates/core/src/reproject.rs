//! Warping preceding low-res feature frames into the current view at target
//! resolution, and bilinear upsampling of the current frame.

use crate::geometry::{project, unproject, CameraIntrinsics, PixelCoord, Pose};
use crate::volren::FeatureFrame;

const NO_SOURCE: u32 = u32::MAX;

/// Forward-scattered feature map at target resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedFeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub features: Vec<f64>,
    pub valid: Vec<bool>,
    pub zbuf: Vec<f64>,
    /// Winning low-res source pixel per target pixel; kept for the value-path transpose.
    source: Vec<u32>,
}

impl WarpedFeatureMap {
    pub fn empty(width: usize, height: usize, channels: usize) -> Self {
        WarpedFeatureMap {
            width,
            height,
            channels,
            features: vec![0.0; width * height * channels],
            valid: vec![false; width * height],
            zbuf: vec![f64::INFINITY; width * height],
            source: vec![NO_SOURCE; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn source(&self, pixel: usize) -> Option<usize> {
        let s = self.source[pixel];
        (s != NO_SOURCE).then_some(s as usize)
    }

    /// Re-scatters `features` (low-res, same layout as the source frame) through this
    /// map's fixed source assignment.
    pub fn rescatter(&self, features: &[f64]) -> Vec<f64> {
        let k = self.channels;
        let mut out = vec![0.0; self.features.len()];
        for (p, &s) in self.source.iter().enumerate() {
            if s != NO_SOURCE {
                let s = s as usize;
                out[p * k..(p + 1) * k].copy_from_slice(&features[s * k..(s + 1) * k]);
            }
        }
        out
    }

    /// Transpose of the value path: adds each valid target gradient onto its source pixel.
    pub fn backward(&self, grad_warped: &[f64], grad_source: &mut [f64]) {
        let k = self.channels;
        for (p, &s) in self.source.iter().enumerate() {
            if s != NO_SOURCE {
                let s = s as usize;
                for c in 0..k {
                    grad_source[s * k + c] += grad_warped[p * k + c];
                }
            }
        }
    }
}

/// Projects every trusted pixel of `prev` straight to the target-resolution image of
/// the current view; nearest depth wins, values are copied without filtering.
pub fn warp_to_highres(
    prev: &FeatureFrame,
    cur_pose: &Pose,
    intr_high: &CameraIntrinsics,
    opacity_valid: f64,
) -> WarpedFeatureMap {
    let (w, h) = (intr_high.width as usize, intr_high.height as usize);
    let k = prev.channels;
    let mut out = WarpedFeatureMap::empty(w, h, k);
    let pw = prev.width();
    // sequential pass: ties keep the earliest source pixel
    for (p, (&z, &a)) in prev.depth.iter().zip(&prev.opacity).enumerate() {
        if a < opacity_valid || z <= 0.0 {
            continue;
        }
        let point = unproject(&prev.intrinsics, &prev.pose, PixelCoord::center(p % pw, p / pw), z);
        let Some((px, d)) = project(intr_high, cur_pose, &point) else {
            continue;
        };
        let (i, j) = px.floor();
        if !intr_high.contains_index(i, j) {
            continue;
        }
        let idx = j as usize * w + i as usize;
        if d < out.zbuf[idx] {
            out.zbuf[idx] = d;
            out.source[idx] = p as u32;
        }
    }
    for idx in 0..w * h {
        if let Some(s) = out.source(idx) {
            out.valid[idx] = true;
            out.features[idx * k..(idx + 1) * k].copy_from_slice(prev.pixel_feature(s));
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(n_low: usize, scale: usize) -> Vec<Tap> {
    (0..n_low * scale)
        .map(|x| {
            let g = ((x as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n_low - 1) as f64);
            let lo = g.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(n_low - 1),
                frac: g - lo as f64,
            }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, aligned at pixel centers with clamped edges.
/// Maps are row-major with `channels` values per pixel.
pub fn upsample(map: &[f64], width: usize, height: usize, channels: usize, scale: usize) -> Vec<f64> {
    assert!(scale >= 1);
    assert_eq!(map.len(), width * height * channels);
    let (tx, ty) = (taps(width, scale), taps(height, scale));
    let wh = width * scale;
    let mut out = vec![0.0; wh * height * scale * channels];
    for (y, ry) in ty.iter().enumerate() {
        for (x, rx) in tx.iter().enumerate() {
            let o = (y * wh + x) * channels;
            let corners = [
                (ry.lo, rx.lo, (1.0 - ry.frac) * (1.0 - rx.frac)),
                (ry.lo, rx.hi, (1.0 - ry.frac) * rx.frac),
                (ry.hi, rx.lo, ry.frac * (1.0 - rx.frac)),
                (ry.hi, rx.hi, ry.frac * rx.frac),
            ];
            for (cy, cx, w) in corners {
                if w == 0.0 {
                    continue;
                }
                let i = (cy * width + cx) * channels;
                for c in 0..channels {
                    out[o + c] += w * map[i + c];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample`].
pub fn upsample_backward(
    grad: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    scale: usize,
) -> Vec<f64> {
    let (tx, ty) = (taps(width, scale), taps(height, scale));
    let wh = width * scale;
    let mut out = vec![0.0; width * height * channels];
    for (y, ry) in ty.iter().enumerate() {
        for (x, rx) in tx.iter().enumerate() {
            let o = (y * wh + x) * channels;
            let corners = [
                (ry.lo, rx.lo, (1.0 - ry.frac) * (1.0 - rx.frac)),
                (ry.lo, rx.hi, (1.0 - ry.frac) * rx.frac),
                (ry.hi, rx.lo, ry.frac * (1.0 - rx.frac)),
                (ry.hi, rx.hi, ry.frac * rx.frac),
            ];
            for (cy, cx, w) in corners {
                if w == 0.0 {
                    continue;
                }
                let i = (cy * width + cx) * channels;
                for c in 0..channels {
                    out[i + c] += w * grad[o + c];
                }
            }
        }
    }
    out
}

/// Upsamples a frame's features by `scale`.
pub fn upsample_frame(frame: &FeatureFrame, scale: usize) -> Vec<f64> {
    upsample(&frame.features, frame.width(), frame.height(), frame.channels, scale)
}
