//! Factor-4 pixel-shuffle decomposition with Bayer-pattern grouping.
//!
//! An image splits losslessly into 16 sub-images by phase offset; phases
//! are assigned to 4 groups by their parity pattern, mirroring the Bayer
//! layout. Short-range correlated noise becomes pixel-independent on the
//! sub-images, which is what makes blind-spot training on them sound.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Downsampling factor.
pub const FACTOR: usize = 4;
/// Number of sub-images (phases).
pub const PHASES: usize = FACTOR * FACTOR;
/// Number of Bayer groups.
pub const GROUPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SubImageSet {
    channels: usize,
    orig_h: usize,
    orig_w: usize,
    /// 16 sub-images in phase order (dy * 4 + dx), each [C, Hp/4, Wp/4].
    subs: Vec<Tensor>,
}

/// Bayer group of a phase: the parity pattern (dy mod 2, dx mod 2).
pub fn group_of_phase(phase: usize) -> usize {
    let (dy, dx) = (phase / FACTOR, phase % FACTOR);
    (dy % 2) * 2 + (dx % 2)
}

/// Phases belonging to one group, in ascending order.
pub fn phases_in_group(group: usize) -> Vec<usize> {
    (0..PHASES).filter(|&p| group_of_phase(p) == group).collect()
}

/// Symmetric-reflection index into `0..n`.
fn reflect(i: usize, n: usize) -> usize {
    // Period-2n symmetric extension: 0 1 .. n-1 n-1 .. 1 0 0 1 ..
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

impl SubImageSet {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn original_size(&self) -> (usize, usize) {
        (self.orig_h, self.orig_w)
    }

    pub fn sub(&self, phase: usize) -> &Tensor {
        &self.subs[phase]
    }

    pub fn subs(&self) -> &[Tensor] {
        &self.subs
    }

    /// Replaces one sub-image (e.g. with its denoised version).
    pub fn set_sub(&mut self, phase: usize, sub: Tensor) -> Result<()> {
        if sub.shape() != self.subs[phase].shape() {
            return Err(Error::shape(format!(
                "sub-image shape {:?} does not match {:?}",
                sub.shape(),
                self.subs[phase].shape()
            )));
        }
        self.subs[phase] = sub;
        Ok(())
    }
}

/// Splits an image into 16 phase sub-images. Sizes not divisible by 4 are
/// reflect-padded; `ps_up` crops back to the original size.
pub fn ps_down(y: &Tensor) -> Result<SubImageSet> {
    let (c, h, w) = y.chw()?;
    let hp = h.div_ceil(FACTOR) * FACTOR;
    let wp = w.div_ceil(FACTOR) * FACTOR;
    let (sh, sw) = (hp / FACTOR, wp / FACTOR);
    let hw = h * w;
    let mut subs = Vec::with_capacity(PHASES);
    for phase in 0..PHASES {
        let (dy, dx) = (phase / FACTOR, phase % FACTOR);
        let mut data = Vec::with_capacity(c * sh * sw);
        for ch in 0..c {
            let plane = &y.data()[ch * hw..(ch + 1) * hw];
            for i in 0..sh {
                let src_i = reflect(i * FACTOR + dy, h);
                for j in 0..sw {
                    let src_j = reflect(j * FACTOR + dx, w);
                    data.push(plane[src_i * w + src_j]);
                }
            }
        }
        subs.push(Tensor::new(vec![c, sh, sw], data)?);
    }
    Ok(SubImageSet { channels: c, orig_h: h, orig_w: w, subs })
}

/// Exact inverse of [`ps_down`]: reassembles and crops to original size.
pub fn ps_up(set: &SubImageSet) -> Result<Tensor> {
    let c = set.channels;
    let (h, w) = (set.orig_h, set.orig_w);
    let first = set.subs[0].shape().to_vec();
    for (phase, sub) in set.subs.iter().enumerate() {
        if sub.shape() != first {
            return Err(Error::shape(format!(
                "sub-image {phase} shape {:?} differs from {:?}",
                sub.shape(),
                first
            )));
        }
    }
    let (sh, sw) = (first[1], first[2]);
    let mut out = Tensor::zeros(vec![c, h, w]);
    let hw = h * w;
    for (phase, sub) in set.subs.iter().enumerate() {
        let (dy, dx) = (phase / FACTOR, phase % FACTOR);
        let shw = sh * sw;
        for ch in 0..c {
            let splane = &sub.data()[ch * shw..(ch + 1) * shw];
            let oplane = &mut out.data_mut()[ch * hw..(ch + 1) * hw];
            for i in 0..sh {
                let oi = i * FACTOR + dy;
                if oi >= h {
                    continue;
                }
                for j in 0..sw {
                    let oj = j * FACTOR + dx;
                    if oj < w {
                        oplane[oi * w + oj] = splane[i * sw + j];
                    }
                }
            }
        }
    }
    Ok(out)
}
