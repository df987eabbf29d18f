//! Noise level functions and noise synthesis.
//!
//! Pixel intensities are normalized to [0, 1]; noise parameters are quoted
//! on the 0-255 scale and rescaled internally. The heteroscedastic variance
//! is `(alpha^2 * x + delta^2) / 255^2` with `x` the normalized intensity.
//! Synthesized images are not clipped: clipping would break the Gaussian
//! likelihood downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::estimator::{apply_learned_nlf, CnnEstParams};
use crate::spd::SymMat;
use crate::tensor::Tensor;

/// Sigma values this close to zero leave the image untouched in practice.
const SIGMA_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseLevelFunction {
    /// Additive white Gaussian noise with a 0-255-scale sigma.
    Awgn { sigma: f64 },
    /// Heteroscedastic Gaussian: variance alpha^2 x + delta^2 on the
    /// 0-255 scale, with x the normalized intensity.
    Hg { alpha: f64, delta: f64 },
    /// Cross-channel multivariate Gaussian with a fixed covariance in
    /// normalized units.
    Mg { cov: SymMat },
    /// An image-specific learned estimator.
    Learned(CnnEstParams),
}

impl NoiseLevelFunction {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseLevelFunction::Awgn { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::config(format!("awgn sigma must be >= 0, got {sigma}")));
                }
            }
            NoiseLevelFunction::Hg { alpha, delta } => {
                if !alpha.is_finite() || *alpha < 0.0 {
                    return Err(Error::config(format!("hg alpha must be >= 0, got {alpha}")));
                }
                if !delta.is_finite() || *delta <= 0.0 {
                    return Err(Error::config(format!("hg delta must be > 0, got {delta}")));
                }
            }
            NoiseLevelFunction::Mg { cov } => {
                let ev = cov.eigenvalues();
                if ev[0] < -1e-12 {
                    return Err(Error::config("mg covariance must be positive semidefinite"));
                }
            }
            NoiseLevelFunction::Learned(_) => {}
        }
        Ok(())
    }

    /// Parses CLI spec strings: `awgn:sigma=25`, `hg:alpha=40,delta=10`,
    /// `mg:scale=75,seed=7`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::config(format!("nlf spec '{spec}' missing ':'")))?;
        let mut kv = std::collections::BTreeMap::new();
        for part in rest.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("nlf spec entry '{part}' missing '='")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("nlf value '{value}' is not a number")))?;
            kv.insert(key.trim().to_string(), value);
        }
        let get = |key: &str| {
            kv.get(key)
                .copied()
                .ok_or_else(|| Error::config(format!("nlf spec '{spec}' missing '{key}'")))
        };
        let nlf = match kind.trim() {
            "awgn" => NoiseLevelFunction::Awgn { sigma: get("sigma")? },
            "hg" => NoiseLevelFunction::Hg { alpha: get("alpha")?, delta: get("delta")? },
            "mg" => {
                let scale = get("scale")?;
                let seed = get("seed")? as u64;
                NoiseLevelFunction::Mg { cov: sample_mg_covariance(scale, seed) }
            }
            other => return Err(Error::config(format!("unknown nlf kind '{other}'"))),
        };
        nlf.validate()?;
        Ok(nlf)
    }

    /// Noise standard deviation at a normalized intensity (scalar kinds).
    pub fn std_at(&self, x: f64) -> f64 {
        match self {
            NoiseLevelFunction::Awgn { sigma } => sigma.max(SIGMA_GUARD) / 255.0,
            NoiseLevelFunction::Hg { alpha, delta } => {
                (alpha * alpha * x + delta * delta).sqrt() / 255.0
            }
            _ => f64::NAN,
        }
    }
}

fn check_unit_range(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::config("clean image must lie in [0, 1]"));
    }
    Ok(())
}

/// Draws `y = x + g(x) . n0` with standard-normal `n0`, deterministic in
/// the seed. Output is not clipped.
pub fn synthesize(nlf: &NoiseLevelFunction, x: &Tensor, seed: u64) -> Result<Tensor> {
    nlf.validate()?;
    check_unit_range(x)?;
    let (c, h, w) = x.chw()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = x.clone();
    out.grad = None;
    match nlf {
        NoiseLevelFunction::Awgn { .. } | NoiseLevelFunction::Hg { .. } => {
            for v in out.data_mut() {
                let std = nlf.std_at(*v);
                *v += std * normal.sample(&mut rng);
            }
        }
        NoiseLevelFunction::Mg { cov } => {
            if cov.dim != c {
                return Err(Error::shape(format!(
                    "mg covariance is {}x{} but image has {c} channels",
                    cov.dim, cov.dim
                )));
            }
            let l = cov
                .cholesky()
                .or_else(|_| cov.add(&SymMat::scaled_identity(c, 1e-15)).cholesky())
                .map_err(|e| Error::numeric(format!("mg covariance not factorizable: {e}")))?;
            let hw = h * w;
            for px in 0..hw {
                let z: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
                for ch in 0..c {
                    let mut n = 0.0;
                    for k in 0..=ch {
                        n += l.raw(ch, k) * z[k];
                    }
                    out.data_mut()[ch * hw + px] += n;
                }
            }
        }
        NoiseLevelFunction::Learned(params) => {
            return apply_learned_nlf(params, x, seed);
        }
    }
    Ok(out)
}

/// Covariance `scale^2 * U diag(lambda) U^T / 255^2` from an explicit
/// orthonormal basis and spectrum.
pub fn mg_covariance_from(u: &[[f64; 3]; 3], lambda: &[f64; 3], scale: f64) -> SymMat {
    let s2 = (scale / 255.0) * (scale / 255.0);
    let mut cov = SymMat::zeros(3);
    for i in 0..3 {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += u[i][k] * lambda[k] * u[j][k];
            }
            cov.set(i, j, s2 * acc);
        }
    }
    cov
}

/// Random cross-channel covariance: orthonormal U from the QR of a
/// Gaussian matrix, eigenvalues uniform in (0, 1), scaled by
/// `scale^2 / 255^2`.
pub fn sample_mg_covariance(scale: f64, seed: u64) -> SymMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    // Gram-Schmidt on a random 3x3 Gaussian matrix's columns.
    let mut cols = [[0.0f64; 3]; 3];
    loop {
        for col in cols.iter_mut() {
            for v in col.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        if gram_schmidt(&mut cols) {
            break;
        }
    }
    // u[i][k] = k-th orthonormal basis vector, component i.
    let mut u = [[0.0f64; 3]; 3];
    for (k, col) in cols.iter().enumerate() {
        for i in 0..3 {
            u[i][k] = col[i];
        }
    }
    let mut lambda = [0.0f64; 3];
    for l in &mut lambda {
        // Open interval (0, 1).
        loop {
            let v: f64 = rng.gen_range(0.0..1.0);
            if v > 0.0 {
                *l = v;
                break;
            }
        }
    }
    mg_covariance_from(&u, &lambda, scale)
}

/// Orthonormalizes three column vectors in place; false if degenerate.
fn gram_schmidt(cols: &mut [[f64; 3]; 3]) -> bool {
    for k in 0..3 {
        let (done, rest) = cols.split_at_mut(k);
        let col = &mut rest[0];
        for prev in done.iter() {
            let dot: f64 = col.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return false;
        }
        for v in col.iter_mut() {
            *v /= norm;
        }
    }
    true
}
