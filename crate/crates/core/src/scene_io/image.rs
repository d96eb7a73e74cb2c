//! RGB float images, binary PPM export and the lossless `.f32img` format.
//!
//! `.f32img` layout (little-endian): `u32 width`, `u32 height`, then
//! `width * height * 3` `f32` values in row-major RGB order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    /// Converts `f64` colors, clamping into `[0, 1]`.
    pub fn from_f64(width: usize, height: usize, colors: &[[f64; 3]]) -> Result<Self> {
        let pixels = colors
            .iter()
            .map(|c| [c[0].clamp(0.0, 1.0) as f32, c[1].clamp(0.0, 1.0) as f32, c[2].clamp(0.0, 1.0) as f32])
            .collect();
        Self::new(width, height, pixels)
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> [f32; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// `round(v * 255)` with halves rounded up, clamped into `0..=255`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 3);
    for p in &img.pixels {
        out.extend(p.iter().map(|&c| quantize(c)));
    }
    out
}

pub fn save_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Header {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let s = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if s == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[s..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("invalid width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("invalid height"))?;
    if fields[3] != "255" {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let payload = bytes.get(i..).unwrap_or(&[]);
    if payload.len() != w * h * 3 {
        return Err(bad("payload size does not match dimensions"));
    }
    let pixels = payload
        .chunks_exact(3)
        .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
        .collect();
    Image::new(w, h, pixels)
}

pub fn encode_f32img(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + img.pixels.len() * 12);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for p in &img.pixels {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn save_f32img(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_f32img(img)).map_err(|e| Error::io(path, e))
}

pub fn load_f32img(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Header {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("file shorter than header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != w * h * 12 {
        return Err(bad("payload size does not match dimensions"));
    }
    let pixels = body
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap());
            [f(0), f(1), f(2)]
        })
        .collect();
    Image::new(w, h, pixels)
}

/// Saves by extension: `.ppm` (8-bit) or anything else as `.f32img`.
pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => save_ppm(path, img),
        _ => save_f32img(path, img),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => load_ppm(path),
        _ => load_f32img(path),
    }
}
