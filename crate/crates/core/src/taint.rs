//! Symbolic receptive-field tracking.
//!
//! A `TaintSet` holds the set of input offsets `(dy, dx)` that can influence
//! an output position after a stack of translation-invariant layers. Layers
//! compose by Minkowski sum; parallel branches and skip connections by
//! union. The blind-spot property of a network is exactly "the fused taint
//! set does not contain (0, 0)", which this module checks mechanically.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaintSet {
    offsets: BTreeSet<(i32, i32)>,
}

impl TaintSet {
    pub fn empty() -> Self {
        TaintSet::default()
    }

    /// The identity taint: an output position depends on itself only.
    /// This is the taint of the input itself and of any 1x1 convolution.
    pub fn identity() -> Self {
        let mut offsets = BTreeSet::new();
        offsets.insert((0, 0));
        TaintSet { offsets }
    }

    pub fn from_offsets(offsets: impl IntoIterator<Item = (i32, i32)>) -> Self {
        TaintSet { offsets: offsets.into_iter().collect() }
    }

    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        self.offsets.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn contains_center(&self) -> bool {
        self.offsets.contains(&(0, 0))
    }

    /// Chebyshev radius of the receptive field.
    pub fn radius(&self) -> usize {
        self.offsets
            .iter()
            .map(|&(dy, dx)| dy.abs().max(dx.abs()) as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn union(&self, other: &TaintSet) -> TaintSet {
        TaintSet { offsets: self.offsets.union(&other.offsets).copied().collect() }
    }

    /// Taint after a k x k convolution with the given dilation applied on
    /// top of this set. `masked` zeroes the central tap.
    pub fn after_conv(&self, k: usize, dilation: usize, masked: bool) -> TaintSet {
        let taps = conv_offsets(k, dilation, masked);
        let mut out = BTreeSet::new();
        for &(py, px) in &self.offsets {
            for &(ty, tx) in &taps {
                out.insert((py + ty, px + tx));
            }
        }
        TaintSet { offsets: out }
    }

    /// Absolute grid positions influencing `(row, col)` on an `h` x `w`
    /// grid, clipped to bounds. Coordinates are 0-indexed.
    pub fn positions_at(&self, row: usize, col: usize, h: usize, w: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for &(dy, dx) in &self.offsets {
            let i = row as i32 + dy;
            let j = col as i32 + dx;
            if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                out.insert((i as usize, j as usize));
            }
        }
        out
    }
}

/// Offset set of one k x k dilated convolution tap pattern.
pub fn conv_offsets(k: usize, dilation: usize, masked: bool) -> Vec<(i32, i32)> {
    let half = (k / 2) as i32;
    let d = dilation as i32;
    let mut out = Vec::with_capacity(k * k);
    for u in -half..=half {
        for v in -half..=half {
            if masked && u == 0 && v == 0 {
                continue;
            }
            out.push((d * u, d * v));
        }
    }
    out
}
