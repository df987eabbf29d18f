//! PSNR and SSIM on [0, 1] image tensors.

use crate::autodiff::pairwise_sum;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR cap returned for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// 10 log10(1 / MSE) over all channels and pixels, capped at 100 dB.
pub fn psnr(reference: &Tensor, test: &Tensor) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    let sq: Vec<f64> = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR after quantizing both images to the 8-bit grid.
pub fn psnr_quantized(reference: &Tensor, test: &Tensor) -> Result<f64> {
    let q = |t: &Tensor| t.map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() / 255.0);
    psnr(&q(reference), &q(test))
}

/// Mean structural similarity over non-overlapping square windows.
pub fn ssim(reference: &Tensor, test: &Tensor, window: usize) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::shape(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    let (c, h, w) = reference.chw()?;
    if window == 0 || h < window || w < window {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than ssim window {window}"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut scores = Vec::new();
    for ch in 0..c {
        let rp = reference.plane(ch);
        let tp = test.plane(ch);
        for bi in 0..h / window {
            for bj in 0..w / window {
                let n = (window * window) as f64;
                let mut sx = 0.0;
                let mut sy = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for i in 0..window {
                    for j in 0..window {
                        let px = (bi * window + i) * w + bj * window + j;
                        let (x, y) = (rp[px], tp[px]);
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                }
                let mx = sx / n;
                let my = sy / n;
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                scores.push(
                    ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                );
            }
        }
    }
    Ok(pairwise_sum(&scores) / scores.len() as f64)
}
