//! Float images, PFM and sRGB PNG.

use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::bake::{read_file, write_file};
use crate::error::{Error, Result};

/// `H×W×C` float image, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub linear: bool,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::invalid(format!("images have 1, 3 or 4 channels, not {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}×{height}×{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pixel ({}, {}) channel {}",
                (i / channels) % width,
                i / channels / width,
                i % channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            linear: true,
            data,
        })
    }

    pub fn from_f64(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Self> {
        Self::new(width, height, channels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Linear RGB values, replicating gray and dropping alpha.
    pub fn rgb(&self) -> Vec<f64> {
        match self.channels {
            3 => self.to_f64(),
            1 => self.data.iter().flat_map(|&v| [v as f64; 3]).collect(),
            _ => self
                .data
                .chunks(4)
                .flat_map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                .collect(),
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn pfm_bytes(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    let mut out = Vec::new();
    write!(out, "{magic}\n{} {}\n-1.0\n", img.width, img.height).unwrap();
    let row = img.width * img.channels;
    let mut buf = [0u8; 4];
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            LittleEndian::write_f32(&mut buf, *v);
            out.extend_from_slice(&buf);
        }
    }
    Ok(out)
}

pub fn save_pfm(img: &ImageBuffer, path: &Path) -> Result<()> {
    write_file(path, &pfm_bytes(img)?)
}

pub fn load_pfm(path: &Path) -> Result<ImageBuffer> {
    parse_pfm(&read_file(path)?, &path.display().to_string())
}

pub fn parse_pfm(bytes: &[u8], ctx: &str) -> Result<ImageBuffer> {
    // three whitespace-separated header tokens followed by a single whitespace byte
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(ctx, "truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::parse(ctx, format!("bad PFM magic '{m}'"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(ctx, format!("bad PFM size '{s}'")));
    let (w, h) = (num(&tokens[1])?, num(&tokens[2])?);
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::parse(ctx, format!("bad PFM scale '{}'", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(ctx, "PFM scale must be a non-zero number"));
    }
    let n = w * h * channels;
    let body = bytes.get(i..i + 4 * n).ok_or_else(|| Error::parse(ctx, format!("truncated: expected {n} floats")))?;
    let row = w * channels;
    let mut data = vec![0f32; n];
    for (k, b) in body.chunks(4).enumerate() {
        let v = if scale < 0.0 {
            LittleEndian::read_f32(b)
        } else {
            BigEndian::read_f32(b)
        };
        let (fy, x) = (k / row, k % row);
        let y = h - 1 - fy;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{ctx}: pixel ({}, {y}) channel {}",
                x / channels,
                x % channels
            )));
        }
        data[y * row + x] = v;
    }
    ImageBuffer::new(w, h, channels, data)
}

/// Loads an 8- or 16-bit PNG, converting sRGB to linear (alpha stays linear).
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw): (usize, Vec<f32>) = match img.color().channel_count() {
        1 | 2 => (1, img.to_luma32f().into_raw()),
        3 => (3, img.to_rgb32f().into_raw()),
        _ => (4, img.to_rgba32f().into_raw()),
    };
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if channels == 4 && i % 4 == 3 {
                v
            } else {
                srgb_to_linear(v as f64) as f32
            }
        })
        .collect();
    ImageBuffer::new(w, h, channels, data)
}

/// Writes an 8-bit sRGB PNG; values are clamped to `[0, 1]`.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let c = img.channels;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let e = if !img.linear || (c == 4 && i % 4 == 3) {
                (v as f64).clamp(0.0, 1.0)
            } else {
                linear_to_srgb(v as f64)
            };
            (e * 255.0).round() as u8
        })
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => image::ExtendedColorType::Rgba8,
    };
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color)?;
    Ok(())
}

/// Loads a PNG or PFM by extension.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pfm") => load_pfm(path),
        Some("png") => load_png(path),
        _ => Err(Error::parse(path.display().to_string(), "expected a .png or .pfm image")),
    }
}
