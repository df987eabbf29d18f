//! Closed-form algebra for small symmetric positive-definite matrices
//! (dimensions 1..=3) and the per-pixel covariance field built on them.
//!
//! Per-pixel covariances are stored as `C*(C+1)/2` planes in lower-triangular
//! row order: (0,0), (1,0), (1,1), (2,0), (2,1), (2,2).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest eigenvalue enforced when reconstructing SPD matrices from
/// network outputs.
pub const EPS_PSD: f64 = 1e-6;

/// Determinants at or below this are treated as singular.
pub const DET_FLOOR: f64 = 1e-14;

/// Number of lower-triangular planes for a `c`-channel covariance.
pub fn tri_len(c: usize) -> usize {
    c * (c + 1) / 2
}

/// Plane index of entry (a, b) with a >= b in lower-triangular row order.
pub fn tri_index(a: usize, b: usize) -> usize {
    debug_assert!(b <= a);
    a * (a + 1) / 2 + b
}

/// A symmetric matrix of dimension 1..=3, stored dense row-major in a
/// fixed 3x3 buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat {
    pub dim: usize,
    m: [f64; 9],
}

impl SymMat {
    pub fn zeros(dim: usize) -> Self {
        debug_assert!((1..=3).contains(&dim));
        SymMat { dim, m: [0.0; 9] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut s = SymMat::zeros(dim);
        for i in 0..dim {
            s.set(i, i, 1.0);
        }
        s
    }

    pub fn scaled_identity(dim: usize, v: f64) -> Self {
        let mut s = SymMat::zeros(dim);
        for i in 0..dim {
            s.set(i, i, v);
        }
        s
    }

    pub fn from_rows(dim: usize, rows: &[f64]) -> Self {
        debug_assert_eq!(rows.len(), dim * dim);
        let mut s = SymMat::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                s.m[i * 3 + j] = rows[i * dim + j];
            }
        }
        s
    }

    /// Builds from lower-triangular planes (the covariance-field layout).
    pub fn from_tri(dim: usize, tri: &[f64]) -> Self {
        debug_assert_eq!(tri.len(), tri_len(dim));
        let mut s = SymMat::zeros(dim);
        for a in 0..dim {
            for b in 0..=a {
                let v = tri[tri_index(a, b)];
                s.set(a, b, v);
            }
        }
        s
    }

    pub fn to_tri(&self) -> Vec<f64> {
        let mut out = vec![0.0; tri_len(self.dim)];
        for a in 0..self.dim {
            for b in 0..=a {
                out[tri_index(a, b)] = self.get(a, b);
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * 3 + j]
    }

    /// Sets (i,j) and (j,i).
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.m[i * 3 + j] = v;
        self.m[j * 3 + i] = v;
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        debug_assert_eq!(self.dim, other.dim);
        let mut out = *self;
        for k in 0..9 {
            out.m[k] += other.m[k];
        }
        out
    }

    pub fn scale(&self, s: f64) -> SymMat {
        let mut out = *self;
        for k in 0..9 {
            out.m[k] *= s;
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn det(&self) -> f64 {
        match self.dim {
            1 => self.get(0, 0),
            2 => self.get(0, 0) * self.get(1, 1) - self.get(0, 1) * self.get(1, 0),
            3 => {
                let m = &self.m;
                m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                    + m[2] * (m[3] * m[7] - m[4] * m[6])
            }
            _ => unreachable!(),
        }
    }

    /// Adjugate-based inverse. Fails when `det <= DET_FLOOR`.
    pub fn inverse(&self) -> Result<SymMat> {
        let det = self.det();
        if !(det > DET_FLOOR) {
            return Err(Error::numeric(format!("singular {}x{} matrix, det={det:e}", self.dim, self.dim)));
        }
        let mut out = SymMat::zeros(self.dim);
        match self.dim {
            1 => out.set(0, 0, 1.0 / det),
            2 => {
                out.set(0, 0, self.get(1, 1) / det);
                out.set(1, 1, self.get(0, 0) / det);
                out.set(1, 0, -self.get(1, 0) / det);
            }
            3 => {
                let m = &self.m;
                // Cofactors of a symmetric 3x3; result is symmetric.
                let c00 = m[4] * m[8] - m[5] * m[7];
                let c01 = m[5] * m[6] - m[3] * m[8];
                let c02 = m[3] * m[7] - m[4] * m[6];
                let c11 = m[0] * m[8] - m[2] * m[6];
                let c12 = m[1] * m[6] - m[0] * m[7];
                let c22 = m[0] * m[4] - m[1] * m[3];
                out.set(0, 0, c00 / det);
                out.set(1, 0, c01 / det);
                out.set(2, 0, c02 / det);
                out.set(1, 1, c11 / det);
                out.set(2, 1, c12 / det);
                out.set(2, 2, c22 / det);
            }
            _ => unreachable!(),
        }
        Ok(out)
    }

    /// Matrix-vector product restricted to the active dimension.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.get(i, j) * v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// tr(self * other); both symmetric.
    pub fn trace_product(&self, other: &SymMat) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += self.get(i, j) * other.get(j, i);
            }
        }
        acc
    }

    /// Eigenvalues in ascending order (closed forms; dim <= 3).
    pub fn eigenvalues(&self) -> Vec<f64> {
        match self.dim {
            1 => vec![self.get(0, 0)],
            2 => {
                let a = self.get(0, 0);
                let d = self.get(1, 1);
                let b = self.get(1, 0);
                let mid = 0.5 * (a + d);
                let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
                vec![mid - disc, mid + disc]
            }
            3 => {
                let a = self;
                let p1 = a.get(0, 1).powi(2) + a.get(0, 2).powi(2) + a.get(1, 2).powi(2);
                if p1 == 0.0 {
                    let mut d = vec![a.get(0, 0), a.get(1, 1), a.get(2, 2)];
                    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                    return d;
                }
                let q = a.trace() / 3.0;
                let p2 = (a.get(0, 0) - q).powi(2)
                    + (a.get(1, 1) - q).powi(2)
                    + (a.get(2, 2) - q).powi(2)
                    + 2.0 * p1;
                let p = (p2 / 6.0).sqrt();
                let mut b = SymMat::zeros(3);
                for i in 0..3 {
                    for j in 0..3 {
                        let v = (a.get(i, j) - if i == j { q } else { 0.0 }) / p;
                        b.m[i * 3 + j] = v;
                    }
                }
                let r = (b.det() / 2.0).clamp(-1.0, 1.0);
                let phi = r.acos() / 3.0;
                let two_pi_3 = 2.0 * std::f64::consts::PI / 3.0;
                let l1 = q + 2.0 * p * phi.cos();
                let l3 = q + 2.0 * p * (phi + two_pi_3).cos();
                let l2 = 3.0 * q - l1 - l3;
                let mut d = vec![l1, l2, l3];
                d.sort_by(|x, y| x.partial_cmp(y).unwrap());
                d
            }
            _ => unreachable!(),
        }
    }

    /// Lower-triangular Cholesky factor. Fails on non-positive pivots.
    pub fn cholesky(&self) -> Result<SymMat> {
        let d = self.dim;
        let mut l = SymMat::zeros(d);
        for i in 0..d {
            for j in 0..=i {
                let mut acc = self.get(i, j);
                for k in 0..j {
                    acc -= l.m[i * 3 + k] * l.m[j * 3 + k];
                }
                if i == j {
                    if acc <= 0.0 {
                        return Err(Error::numeric(format!(
                            "cholesky failed: pivot {acc:e} at row {i}"
                        )));
                    }
                    l.m[i * 3 + i] = acc.sqrt();
                } else {
                    l.m[i * 3 + j] = acc / l.m[j * 3 + j];
                }
            }
        }
        // Zero the upper triangle (SymMat::set mirrors, so rebuild cleanly).
        let mut out = SymMat::zeros(d);
        for i in 0..d {
            for j in 0..=i {
                out.m[i * 3 + j] = l.m[i * 3 + j];
            }
        }
        Ok(out)
    }

    /// Raw row-major access for factors that are not symmetric (Cholesky L).
    #[inline]
    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.m[i * 3 + j]
    }
}

/// Inverse, determinant and trace of a small SPD matrix in one call.
pub fn spd_inv_det_trace(m: &SymMat) -> Result<(SymMat, f64, f64)> {
    let det = m.det();
    if !(det > DET_FLOOR) {
        return Err(Error::numeric(format!("matrix not positive definite, det={det:e}")));
    }
    Ok((m.inverse()?, det, m.trace()))
}

/// Per-pixel C x C symmetric matrix field stored as C(C+1)/2 planes.
#[derive(Debug, Clone, PartialEq)]
pub struct CovField {
    channels: usize,
    height: usize,
    width: usize,
    /// `[tri_len(C), H, W]` tensor of lower-triangular planes.
    planes: Tensor,
}

impl CovField {
    pub fn new(channels: usize, planes: Tensor) -> Result<Self> {
        let (p, h, w) = planes.chw()?;
        if p != tri_len(channels) {
            return Err(Error::shape(format!(
                "covariance field for C={channels} needs {} planes, got {p}",
                tri_len(channels)
            )));
        }
        Ok(CovField { channels, height: h, width: w, planes })
    }

    /// Constant field holding `m` at every pixel.
    pub fn constant(m: &SymMat, height: usize, width: usize) -> Self {
        let tri = m.to_tri();
        let p = tri.len();
        let mut data = vec![0.0; p * height * width];
        for (k, &v) in tri.iter().enumerate() {
            data[k * height * width..(k + 1) * height * width].fill(v);
        }
        CovField {
            channels: m.dim,
            height,
            width,
            planes: Tensor::new(vec![p, height, width], data).unwrap(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn into_planes(self) -> Tensor {
        self.planes
    }

    pub fn mat_at(&self, i: usize, j: usize) -> SymMat {
        let hw = self.height * self.width;
        let off = i * self.width + j;
        let mut tri = vec![0.0; tri_len(self.channels)];
        for (k, t) in tri.iter_mut().enumerate() {
            *t = self.planes.data()[k * hw + off];
        }
        SymMat::from_tri(self.channels, &tri)
    }

    pub fn set_mat_at(&mut self, i: usize, j: usize, m: &SymMat) {
        let hw = self.height * self.width;
        let off = i * self.width + j;
        let tri = m.to_tri();
        for (k, &v) in tri.iter().enumerate() {
            self.planes.data_mut()[k * hw + off] = v;
        }
    }

    /// Smallest eigenvalue over all pixels.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.height {
            for j in 0..self.width {
                let ev = self.mat_at(i, j).eigenvalues();
                if ev[0] < min {
                    min = ev[0];
                }
            }
        }
        min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> SymMat {
        // R R^T + 0.1 I is comfortably positive definite.
        let mut r = [[0.0; 3]; 3];
        for row in r.iter_mut().take(dim) {
            for v in row.iter_mut().take(dim) {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut s = SymMat::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += r[i][k] * r[j][k];
                }
                s.set(i, j, acc + if i == j { 0.1 } else { 0.0 });
            }
        }
        s
    }

    #[test]
    fn identity_inverse_det_trace() {
        for dim in 1..=3 {
            let id = SymMat::identity(dim);
            let (inv, det, tr) = spd_inv_det_trace(&id).unwrap();
            assert_eq!(inv, id);
            assert_eq!(det, 1.0);
            assert_eq!(tr, dim as f64);
        }
    }

    #[test]
    fn diagonal_two_by_two() {
        let mut m = SymMat::zeros(2);
        m.set(0, 0, 2.0);
        m.set(1, 1, 3.0);
        let (inv, det, tr) = spd_inv_det_trace(&m).unwrap();
        assert!((inv.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((inv.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(inv.get(0, 1), 0.0);
        assert!((det - 6.0).abs() < 1e-15);
        assert!((tr - 5.0).abs() < 1e-15);
    }

    #[test]
    fn random_3x3_inverse_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_spd(3, &mut rng);
            let inv = m.inverse().unwrap();
            // M * M^-1 should be the identity to 1e-10.
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += m.get(i, k) * inv.get(k, j);
                    }
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (acc - expect).abs() < 1e-10,
                        "residual {} at ({i},{j})",
                        (acc - expect).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = SymMat::zeros(2);
        assert!(m.inverse().is_err());
        assert!(spd_inv_det_trace(&m).is_err());
    }

    #[test]
    fn eigenvalues_match_characteristic_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in 1..=3usize {
            for _ in 0..30 {
                let m = random_spd(dim, &mut rng);
                let ev = m.eigenvalues();
                assert_eq!(ev.len(), dim);
                // Eigenvalue sum equals trace, product equals determinant.
                let sum: f64 = ev.iter().sum();
                let prod: f64 = ev.iter().product();
                assert!((sum - m.trace()).abs() < 1e-9, "trace mismatch dim {dim}");
                assert!(
                    (prod - m.det()).abs() < 1e-9 * m.det().abs().max(1.0),
                    "det mismatch dim {dim}"
                );
                assert!(ev[0] > 0.0, "SPD matrix must have positive spectrum");
            }
        }
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in 1..=3usize {
            for _ in 0..20 {
                let m = random_spd(dim, &mut rng);
                let l = m.cholesky().unwrap();
                for i in 0..dim {
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for k in 0..dim {
                            acc += l.raw(i, k) * l.raw(j, k);
                        }
                        assert!((acc - m.get(i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn covfield_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m0 = random_spd(3, &mut rng);
        let mut field = CovField::constant(&SymMat::identity(3), 4, 5);
        field.set_mat_at(2, 3, &m0);
        assert_eq!(field.mat_at(2, 3), m0);
        assert_eq!(field.mat_at(0, 0), SymMat::identity(3));
        assert_eq!(field.planes().shape(), &[6, 4, 5]);
    }

    #[test]
    fn tri_indexing() {
        assert_eq!(tri_len(1), 1);
        assert_eq!(tri_len(2), 3);
        assert_eq!(tri_len(3), 6);
        assert_eq!(tri_index(0, 0), 0);
        assert_eq!(tri_index(1, 0), 1);
        assert_eq!(tri_index(1, 1), 2);
        assert_eq!(tri_index(2, 2), 5);
    }
}
