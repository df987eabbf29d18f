//! Likelihood terms and Bayes fusion.
//!
//! The exact per-pixel negative log-likelihood, its constrained form with
//! the log-determinant replaced by a first-order expansion around the
//! noise covariance, and the posterior-mean fusion of observation and
//! blind-spot prediction. Everything here is pure; the differentiable path
//! used in training lives in [`crate::autodiff`] and is cross-checked
//! against these functions in the tests.

use crate::autodiff::pairwise_sum;
use crate::error::{Error, Result};
use crate::spd::{CovField, SymMat};
use crate::tensor::Tensor;

/// Condition numbers above this make the exact likelihood meaningless.
const COND_LIMIT: f64 = 1e12;

/// Mean per-pixel decomposition of the constrained likelihood.
#[derive(Debug, Clone)]
pub struct LossTerms {
    /// y - mu, all pixels (also outside the valid mask).
    pub residual: Tensor,
    /// Mean over valid pixels of eps^T (S_n + S_mu)^-1 eps.
    pub quadratic: f64,
    /// Mean over valid pixels of log |S_n|.
    pub logdet: f64,
    /// Mean over valid pixels of tr(S_n^-1 S_mu).
    pub trace: f64,
    /// Mean over valid pixels of half the sum of the three terms.
    pub total: f64,
    pub valid_pixels: usize,
}

/// Exact negative log-likelihood of one pixel:
/// 1/2 eps^T (S_n + S_mu)^-1 eps + 1/2 log |S_n + S_mu|.
pub fn nll_exact(y: &[f64], mu: &[f64], sigma_n: &SymMat, sigma_mu: &SymMat) -> Result<f64> {
    let s = sigma_n.add(sigma_mu);
    let ev = s.eigenvalues();
    let (min, max) = (ev[0], ev[ev.len() - 1]);
    if !(min > 0.0) || max / min > COND_LIMIT {
        return Err(Error::numeric(format!(
            "covariance sum ill-conditioned: eigenvalues [{min:e}, {max:e}]"
        )));
    }
    let inv = s.inverse()?;
    let eps: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    let sv = inv.mul_vec(&eps);
    let quad: f64 = eps.iter().zip(&sv).map(|(a, b)| a * b).sum();
    Ok(0.5 * quad + 0.5 * s.det().ln())
}

/// First-order expansion of `log |S_n + S_mu|` around `S_n`:
/// `log |S_n| + tr(S_n^-1 S_mu)`.
pub fn taylor_logdet(sigma_n: &SymMat, sigma_mu: &SymMat) -> Result<f64> {
    let det = sigma_n.det();
    if !(det > crate::spd::DET_FLOOR) {
        return Err(Error::numeric("sigma_n singular in log-det expansion"));
    }
    let inv = sigma_n.inverse()?;
    Ok(det.ln() + inv.trace_product(sigma_mu))
}

/// Constrained negative log-likelihood over covariance fields, averaged
/// over the pixels where `valid` is true.
pub fn constrained_nll_field(
    y: &Tensor,
    mu: &Tensor,
    sigma_n: &CovField,
    sigma_mu: &CovField,
    valid: &[bool],
) -> Result<LossTerms> {
    let (c, h, w) = y.chw()?;
    if mu.shape() != y.shape() {
        return Err(Error::shape("mu shape does not match observation"));
    }
    if sigma_n.channels() != c || sigma_mu.channels() != c {
        return Err(Error::shape("covariance channel mismatch"));
    }
    if sigma_n.height() != h || sigma_n.width() != w || sigma_mu.height() != h || sigma_mu.width() != w
    {
        return Err(Error::shape("covariance spatial mismatch"));
    }
    if valid.len() != h * w {
        return Err(Error::shape("valid mask length mismatch"));
    }
    let hw = h * w;
    let mut residual = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for px in 0..hw {
            residual.data_mut()[ch * hw + px] = y.data()[ch * hw + px] - mu.data()[ch * hw + px];
        }
    }
    let mut quad_terms = Vec::new();
    let mut logdet_terms = Vec::new();
    let mut trace_terms = Vec::new();
    for px in 0..hw {
        if !valid[px] {
            continue;
        }
        let (i, j) = (px / w, px % w);
        let sn = sigma_n.mat_at(i, j);
        let smu = sigma_mu.mat_at(i, j);
        let det_n = sn.det();
        if !(det_n > crate::spd::DET_FLOOR) {
            return Err(Error::numeric(format!("sigma_n not SPD at pixel ({i},{j})")));
        }
        let s = sn.add(&smu);
        let s_inv = s
            .inverse()
            .map_err(|_| Error::numeric(format!("covariance sum singular at pixel ({i},{j})")))?;
        let sn_inv = sn
            .inverse()
            .map_err(|_| Error::numeric(format!("sigma_n singular at pixel ({i},{j})")))?;
        let eps: Vec<f64> = (0..c).map(|ch| residual.data()[ch * hw + px]).collect();
        let sv = s_inv.mul_vec(&eps);
        quad_terms.push(eps.iter().zip(&sv).map(|(a, b)| a * b).sum());
        logdet_terms.push(det_n.ln());
        trace_terms.push(sn_inv.trace_product(&smu));
    }
    if quad_terms.is_empty() {
        return Err(Error::config("no valid pixels in loss mask"));
    }
    let n = quad_terms.len() as f64;
    let quadratic = pairwise_sum(&quad_terms) / n;
    let logdet = pairwise_sum(&logdet_terms) / n;
    let trace = pairwise_sum(&trace_terms) / n;
    Ok(LossTerms {
        residual,
        quadratic,
        logdet,
        trace,
        total: 0.5 * (quadratic + logdet + trace),
        valid_pixels: quad_terms.len(),
    })
}

/// Posterior-mean fusion of observation and prediction at one pixel,
/// computed as `mu + (S_mu + S_n)^-1 S_mu (y - mu)` so that a zero
/// prediction covariance returns `mu` exactly.
pub fn bayes_fuse(y: &[f64], mu: &[f64], sigma_n: &SymMat, sigma_mu: &SymMat) -> Result<Vec<f64>> {
    let c = sigma_n.dim;
    let s = sigma_n.add(sigma_mu);
    let s_inv = s.inverse().map_err(|_| Error::numeric("covariance sum singular in fusion"))?;
    let eps: Vec<f64> = y.iter().zip(mu).map(|(a, b)| a - b).collect();
    // w = S^-1 * S_mu * eps
    let mut smu_eps = vec![0.0; c];
    for i in 0..c {
        for j in 0..c {
            smu_eps[i] += sigma_mu.get(i, j) * eps[j];
        }
    }
    let correction = s_inv.mul_vec(&smu_eps);
    Ok(mu.iter().zip(&correction).map(|(m, d)| m + d).collect())
}

/// Bayes fusion applied per pixel over whole fields.
pub fn bayes_fuse_field(
    y: &Tensor,
    mu: &Tensor,
    sigma_n: &CovField,
    sigma_mu: &CovField,
) -> Result<Tensor> {
    let (c, h, w) = y.chw()?;
    if mu.shape() != y.shape() {
        return Err(Error::shape("mu shape does not match observation"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for i in 0..h {
        for j in 0..w {
            let px = i * w + j;
            let yv: Vec<f64> = (0..c).map(|ch| y.data()[ch * hw + px]).collect();
            let mv: Vec<f64> = (0..c).map(|ch| mu.data()[ch * hw + px]).collect();
            let fused = bayes_fuse(&yv, &mv, &sigma_n.mat_at(i, j), &sigma_mu.mat_at(i, j))
                .map_err(|e| Error::numeric(format!("fusion failed at ({i},{j}): {e}")))?;
            for ch in 0..c {
                out.data_mut()[ch * hw + px] = fused[ch];
            }
        }
    }
    Ok(out)
}
