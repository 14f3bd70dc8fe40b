//! Image quality metrics.

use crate::error::MetricError;
use crate::imaging::ImageRGB;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shape(a: &ImageRGB, b: &ImageRGB) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(MetricError::ShapeMismatch((a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR for a mean squared error with peak 1.0, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filter over valid positions only.
fn filter_valid(img: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity on the channel-mean grayscale image: 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, averaged over valid windows.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64, MetricError> {
    check_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall(w, h, SSIM_WINDOW));
    }
    let gray = |img: &ImageRGB| -> Vec<f64> { img.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect() };
    let (x, y) = (gray(a), gray(b));
    let g = gaussian_window();
    let mul = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(&x, w, h, &g);
    let mu_y = filter_valid(&y, w, h, &g);
    let xx = filter_valid(&mul(&x, &x), w, h, &g);
    let yy = filter_valid(&mul(&y, &y), w, h, &g);
    let xy = filter_valid(&mul(&x, &y), w, h, &g);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}
