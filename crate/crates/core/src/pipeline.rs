//! Real-photograph denoising pipeline.
//!
//! Spatially correlated noise breaks the pixel-independence assumption, so
//! the image is pixel-shuffle decomposed first: each of the 16 sub-images
//! is denoised with the model of its Bayer group, the results are
//! reassembled, and a self-guided filter smooths the reassembly seams.

use crate::error::{Error, Result};
use crate::guided::guided_filter;
use crate::pixelshuffle::{group_of_phase, ps_down, ps_up, PHASES};
use crate::tensor::Tensor;
use crate::threads::map_limited;

/// Guided-filter radius used for the final smoothing.
pub const GUIDED_RADIUS: usize = 1;
/// Guided-filter regularization used for the final smoothing.
pub const GUIDED_EPS: f64 = 0.01;

/// Per-group denoiser: maps (group index, noisy sub-image) to a denoised
/// sub-image of the same shape.
pub trait GroupDenoiser: Sync {
    fn denoise(&self, group: usize, sub: &Tensor) -> Result<Tensor>;
}

impl<F> GroupDenoiser for F
where
    F: Fn(usize, &Tensor) -> Result<Tensor> + Sync,
{
    fn denoise(&self, group: usize, sub: &Tensor) -> Result<Tensor> {
        self(group, sub)
    }
}

/// Pixel-shuffle split, per-group denoising, reassembly, guided filtering.
pub fn real_denoise_pipeline(denoiser: &dyn GroupDenoiser, y: &Tensor) -> Result<Tensor> {
    let mut set = ps_down(y)?;
    let inputs: Vec<(usize, Tensor)> =
        (0..PHASES).map(|phase| (phase, set.sub(phase).clone())).collect();
    let results = map_limited(inputs, |(phase, sub)| {
        let group = group_of_phase(phase);
        let out = denoiser.denoise(group, &sub)?;
        if out.shape() != sub.shape() {
            return Err(Error::shape(format!(
                "denoiser changed sub-image shape: {:?} -> {:?}",
                sub.shape(),
                out.shape()
            )));
        }
        Ok::<(usize, Tensor), Error>((phase, out))
    });
    for r in results {
        let (phase, out) = r?;
        set.set_sub(phase, out)?;
    }
    let reassembled = ps_up(&set)?;
    guided_filter(&reassembled, &reassembled, GUIDED_RADIUS, GUIDED_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_denoiser_reduces_to_guided_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::new(
            vec![1, 17, 23],
            (0..17 * 23).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let identity = |_: usize, sub: &Tensor| Ok(sub.clone());
        let out = real_denoise_pipeline(&identity, &y).unwrap();
        let expect = guided_filter(&y, &y, GUIDED_RADIUS, GUIDED_EPS).unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        // A denoiser that depends on the group index.
        let den = |group: usize, sub: &Tensor| Ok(sub.map(|v| v * (1.0 + group as f64 * 0.1)));
        let a = real_denoise_pipeline(&den, &y).unwrap();
        let b = real_denoise_pipeline(&den, &y).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_group_model_propagates_error() {
        let y = Tensor::zeros(vec![1, 8, 8]);
        let den = |group: usize, sub: &Tensor| {
            if group == 2 {
                Err(crate::error::Error::config("no model for group 2"))
            } else {
                Ok(sub.clone())
            }
        };
        assert!(real_denoise_pipeline(&den, &y).is_err());
    }

    #[test]
    fn denoiser_changing_shape_rejected() {
        let y = Tensor::zeros(vec![1, 8, 8]);
        let den = |_: usize, _: &Tensor| Ok(Tensor::zeros(vec![1, 3, 3]));
        assert!(real_denoise_pipeline(&den, &y).is_err());
    }
}
