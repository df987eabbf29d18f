//! Guided filter with box windows.
//!
//! Local linear model per channel: a = cov(I, p) / (var(I) + eps),
//! b = mean(p) - a * mean(I), output = mean(a) * I + mean(b). Box means
//! use clipped windows near the borders (true local averages). Box sums
//! run on integral images, so the filter is linear-time in the pixel
//! count for any radius.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integral image with a zero top row and left column.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut s = vec![0.0; (h + 1) * stride];
    for i in 0..h {
        let mut row_acc = 0.0;
        for j in 0..w {
            row_acc += plane[i * w + j];
            s[(i + 1) * stride + (j + 1)] = s[i * stride + (j + 1)] + row_acc;
        }
    }
    s
}

/// Mean over the clipped (2r+1)-square window centered at each pixel.
fn box_mean(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let s = integral(plane, h, w);
    let stride = w + 1;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let i0 = i.saturating_sub(r);
        let i1 = (i + r + 1).min(h);
        for j in 0..w {
            let j0 = j.saturating_sub(r);
            let j1 = (j + r + 1).min(w);
            let sum = s[i1 * stride + j1] - s[i0 * stride + j1] - s[i1 * stride + j0]
                + s[i0 * stride + j0];
            out[i * w + j] = sum / ((i1 - i0) * (j1 - j0)) as f64;
        }
    }
    out
}

/// Edge-preserving smoothing of `p` steered by guide `I`, per channel.
pub fn guided_filter(p: &Tensor, guide: &Tensor, radius: usize, eps: f64) -> Result<Tensor> {
    let (c, h, w) = p.chw()?;
    if guide.shape() != p.shape() {
        return Err(Error::shape(format!(
            "guide shape {:?} does not match input {:?}",
            guide.shape(),
            p.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config("guided filter eps must be positive"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let pp = p.plane(ch);
        let ii = guide.plane(ch);
        let mean_i = box_mean(ii, h, w, radius);
        let mean_p = box_mean(pp, h, w, radius);
        let ip: Vec<f64> = ii.iter().zip(pp).map(|(a, b)| a * b).collect();
        let i2: Vec<f64> = ii.iter().map(|a| a * a).collect();
        let corr_ip = box_mean(&ip, h, w, radius);
        let corr_ii = box_mean(&i2, h, w, radius);
        let mut a = vec![0.0; hw];
        let mut b = vec![0.0; hw];
        for px in 0..hw {
            let var = corr_ii[px] - mean_i[px] * mean_i[px];
            let cov = corr_ip[px] - mean_i[px] * mean_p[px];
            a[px] = cov / (var + eps);
            b[px] = mean_p[px] - a[px] * mean_i[px];
        }
        let mean_a = box_mean(&a, h, w, radius);
        let mean_b = box_mean(&b, h, w, radius);
        let oplane = out.plane_mut(ch);
        for px in 0..hw {
            oplane[px] = mean_a[px] * ii[px] + mean_b[px];
        }
    }
    Ok(out)
}
