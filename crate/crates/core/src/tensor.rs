//! Dense row-major tensor of 64-bit floats.
//!
//! The carrier type for images, feature maps, parameters and gradients.
//! Shapes are conventionally `[C, H, W]` for image-like data, but any rank
//! is allowed. Computation stays in f64; only the binary dump format
//! (`write_dump`/`read_dump`) narrows to f32.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic bytes of the tensor dump format.
pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
/// Current tensor dump version.
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Leaves with `requires_grad` accumulate gradients during `Graph::backward`.
    pub requires_grad: bool,
    /// Filled by the backward pass; same length as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// True when the tensor is a single element (any rank).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(format!("expected rank-3 [C,H,W], got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(i < h && j < w);
        self.data[(c * h + i) * w + j]
    }

    pub fn set3(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j] = v;
    }

    /// Contiguous `H*W` plane of channel `c` in a `[C,H,W]` tensor.
    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.shape[1] * self.shape[2];
        &mut self.data[c * hw..(c + 1) * hw]
    }

    /// Symmetric reflection padding of a `[C,H,W]` tensor by `r` pixels
    /// on every side.
    pub fn reflect_pad3(&self, r: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        let (hp, wp) = (h + 2 * r, w + 2 * r);
        let reflect = |i: isize, n: usize| -> usize {
            let m = i.rem_euclid(2 * n as isize) as usize;
            if m < n {
                m
            } else {
                2 * n - 1 - m
            }
        };
        let mut out = Tensor::zeros(vec![c, hp, wp]);
        for ch in 0..c {
            let src = self.plane(ch);
            let dst = out.plane_mut(ch);
            for i in 0..hp {
                let si = reflect(i as isize - r as isize, h);
                for j in 0..wp {
                    let sj = reflect(j as isize - r as isize, w);
                    dst[i * wp + j] = src[si * w + sj];
                }
            }
        }
        Ok(out)
    }

    /// Spatial crop of a `[C,H,W]` tensor.
    pub fn crop3(&self, i0: usize, j0: usize, ph: usize, pw: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        if i0 + ph > h || j0 + pw > w {
            return Err(Error::shape(format!(
                "crop [{i0}+{ph}, {j0}+{pw}] exceeds {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            let plane = self.plane(ch);
            for i in 0..ph {
                let row = (i0 + i) * w + j0;
                data.extend_from_slice(&plane[row..row + pw]);
            }
        }
        Tensor::new(vec![c, ph, pw], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Writes the binary dump: magic "TNSR", u32 version, u32 rank,
    /// u32 dims, then a little-endian f32 payload.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by [`Tensor::write_dump`], widening back to f64.
    pub fn read_dump(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::format("bad tensor magic"));
        }
        let version = read_u32(r)?;
        if version != TENSOR_VERSION {
            return Err(Error::format(format!("unsupported tensor version {version}")));
        }
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Tensor::new(shape, data)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn plane_access() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.plane(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.plane(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(t.at3(1, 0, 1), 5.0);
    }

    #[test]
    fn dump_roundtrip_exact_for_f32_values() {
        // Values representable in f32 survive the narrowing bit-exactly.
        let t = Tensor::new(vec![1, 2, 3], vec![0.5, -1.25, 3.0, 0.0, 255.0, 1.0 / 256.0]).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"TNSR");
        let back = Tensor::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let mut buf = Vec::new();
        Tensor::scalar(1.0).write_dump(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::read_dump(&mut buf.as_slice()).is_err());
    }
}
