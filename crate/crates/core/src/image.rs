//! Binary PGM (P5) and PPM (P6) image I/O.
//!
//! Pixels map 8-bit <-> [0, 1]. Values are clamped to [0, 1] only when
//! saving, never during computation; saving rounds half up.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// `[C, H, W]` with C = 1 (PGM) or 3 (PPM), nominally in [0, 1].
    pub data: Tensor,
    pub bit_depth: u8,
    pub id: Option<String>,
}

impl Image {
    pub fn new(data: Tensor, id: Option<String>) -> Result<Self> {
        let (c, _, _) = data.chw()?;
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("images must have 1 or 3 channels, got {c}")));
        }
        Ok(Image { data, bit_depth: 8, id })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn mean_intensity(&self) -> f64 {
        crate::autodiff::pairwise_sum(self.data.data()) / self.data.numel() as f64
    }
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_header_int(bytes: &[u8], pos: usize) -> Result<(usize, usize)> {
    let pos = skip_whitespace_and_comments(bytes, pos);
    let start = pos;
    let mut end = pos;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::format("expected integer in image header"));
    }
    let value: usize = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::format("non-utf8 header"))?
        .parse()
        .map_err(|_| Error::format("header integer out of range"))?;
    Ok((value, end))
}

/// Decodes a P5 or P6 image from raw bytes.
pub fn decode(bytes: &[u8], id: Option<String>) -> Result<Image> {
    if bytes.len() < 2 {
        return Err(Error::format("file too short for a PNM header"));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::format(format!(
                "unsupported magic {:?}; only binary P5/P6 are handled",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let (width, pos) = read_header_int(bytes, 2)?;
    let (height, pos) = read_header_int(bytes, pos)?;
    let (maxval, pos) = read_header_int(bytes, pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("only 8-bit images supported, maxval={maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("zero image dimension"));
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("missing separator before pixel data"));
    }
    let payload = &bytes[pos + 1..];
    let expected = width * height * channels;
    if payload.len() < expected {
        return Err(Error::format(format!(
            "truncated payload: expected {expected} bytes, got {}",
            payload.len()
        )));
    }
    let hw = width * height;
    let mut data = vec![0.0; channels * hw];
    // P6 interleaves RGB; planes are separated here.
    for px in 0..hw {
        for c in 0..channels {
            data[c * hw + px] = payload[px * channels + c] as f64 / maxval as f64;
        }
    }
    let tensor = Tensor::new(vec![channels, height, width], data)?;
    Image::new(tensor, id)
}

/// Encodes to P5 (1 channel) or P6 (3 channels) with maxval 255,
/// clamping to [0, 1] and rounding half up.
pub fn encode(image: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = image.data.chw()?;
    let magic: &[u8] = if c == 1 { b"P5" } else { b"P6" };
    let mut out = Vec::with_capacity(c * h * w + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{w} {h}\n255\n").as_bytes());
    let hw = h * w;
    for px in 0..hw {
        for ch in 0..c {
            let v = image.data.data()[ch * hw + px].clamp(0.0, 1.0);
            out.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    decode(&bytes, id)
}

pub fn save(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads every .pgm/.ppm file in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no .pgm/.ppm images in {}", dir.display())));
    }
    paths.iter().map(|p| load(p)).collect()
}
