//! Image, depth and flow file formats.
//!
//! Images: 8-bit PNG (gray or RGB) and binary PPM (`P6`). Depth: PFM
//! (`Pf`, little-endian) and 16-bit PNG with a declared scale. Flow:
//! Middlebury `.flo`. Every writer goes through [`write_atomic`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageEncoder, Luma};

use crate::losses::DepthSupervision;
use crate::types::{DepthMap, FlowField, Image};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse { path: PathBuf, offset: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

/// Byte-level parse failure before a path is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        Self { offset, message: message.into() }
    }

    fn at(self, path: &Path) -> IoError {
        IoError::Parse { path: path.to_path_buf(), offset: self.offset, message: self.message }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| IoError::format(path, "not a file path"))?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(IoError::io(path, e));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

fn extension(path: &Path) -> String {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default()
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_bytes(img: &Image) -> Vec<u8> {
    img.data.iter().map(|&v| quantize(v)).collect()
}

// ---------------------------------------------------------------- PPM

/// Whitespace-separated header fields with `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<(&'a [u8], usize), ParseError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ParseError::new(start, format!("missing {what}")));
        }
        Ok((&self.bytes[start..self.pos], start))
    }

    fn number(&mut self, what: &str) -> Result<usize, ParseError> {
        let (tok, at) = self.token(what)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ParseError::new(at, format!("invalid {what}")))
    }
}

/// Parses a binary `P6` PPM with `maxval ≤ 255`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image, ParseError> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let (magic, at) = r.token("magic number")?;
    if magic != b"P6" {
        return Err(ParseError::new(at, "expected magic number P6"));
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = {
        r.skip_space();
        r.pos
    };
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ParseError::new(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(ParseError::new(0, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(ParseError::new(r.pos, "missing whitespace after header"));
    }
    let start = r.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ParseError::new(0, "image dimensions overflow"))?;
    if bytes.len() < start + need {
        return Err(ParseError::new(
            bytes.len(),
            format!("truncated raster: expected {need} bytes, found {}", bytes.len() - start),
        ));
    }
    let scale = maxval as f64;
    let data = bytes[start..start + need].iter().map(|&b| b as f64 / scale).collect();
    Ok(Image::new(width, height, 3, data))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let rgb = to_rgb(img);
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(image_bytes(&rgb));
    out
}

fn to_rgb(img: &Image) -> Image {
    match img.channels {
        3 => img.clone(),
        1 => Image::new(img.width, img.height, 3, img.data.iter().flat_map(|&v| [v, v, v]).collect()),
        c => Image::new(
            img.width,
            img.height,
            3,
            img.data.chunks(c).flat_map(|p| [p[0], p[1.min(c - 1)], p[2.min(c - 1)]]).collect(),
        ),
    }
}

// ---------------------------------------------------------------- PNG

fn encode_png(width: usize, height: usize, color: image::ExtendedColorType, raw: &[u8]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, width as u32, height as u32, color)
        .map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn encode_png_image(img: &Image) -> Result<Vec<u8>, String> {
    match img.channels {
        1 => encode_png(img.width, img.height, image::ExtendedColorType::L8, &image_bytes(img)),
        _ => encode_png(img.width, img.height, image::ExtendedColorType::Rgb8, &image_bytes(&to_rgb(img))),
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<image::DynamicImage, IoError> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| IoError::format(path, e.to_string()))
}

/// Reads an 8-bit PNG or a `P6` PPM. Gray PNGs yield one channel; anything
/// else is converted to RGB.
pub fn read_image(path: &Path) -> Result<Image, IoError> {
    let bytes = read_bytes(path)?;
    if extension(path) == "ppm" || bytes.starts_with(b"P6") {
        return parse_ppm(&bytes).map_err(|e| e.at(path));
    }
    let img = decode_png(path, &bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if matches!(img.color(), image::ColorType::L8 | image::ColorType::L16) {
        let g = img.into_luma8();
        return Ok(Image::new(w, h, 1, g.into_raw().into_iter().map(|b| b as f64 / 255.0).collect()));
    }
    let rgb = img.into_rgb8();
    Ok(Image::new(w, h, 3, rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect()))
}

/// Writes PNG, or PPM when the extension is `.ppm`.
pub fn write_image(path: &Path, img: &Image) -> Result<(), IoError> {
    let bytes = if extension(path) == "ppm" {
        encode_ppm(img)
    } else {
        encode_png_image(img).map_err(|m| IoError::format(path, m))?
    };
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- depth

/// Parses a single-channel PFM (`Pf`). Negative scale means little-endian.
pub fn parse_pfm(bytes: &[u8]) -> Result<DepthMap, ParseError> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let (magic, at) = r.token("magic number")?;
    if magic != b"Pf" {
        return Err(ParseError::new(at, "expected magic number Pf (single channel)"));
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let (tok, at) = r.token("scale")?;
    let scale: f64 = std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| ParseError::new(at, "invalid scale"))?;
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(ParseError::new(r.pos, "missing whitespace after header"));
    }
    let start = r.pos + 1;
    let need = width * height * 4;
    if bytes.len() < start + need {
        return Err(ParseError::new(bytes.len(), format!("truncated raster: expected {need} bytes")));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; width * height];
    for (k, chunk) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        // Rows are stored bottom to top.
        let (row, col) = (k / width, k % width);
        data[(height - 1 - row) * width + col] = v as f64;
    }
    Ok(DepthMap::new(width, height, data))
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for row in (0..depth.height).rev() {
        for v in &depth.data[row * depth.width..(row + 1) * depth.width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a PFM, or a 16-bit PNG whose values are multiplied by `png_scale`.
/// Zero depth marks a missing measurement.
pub fn read_depth(path: &Path, png_scale: f64) -> Result<DepthMap, IoError> {
    let bytes = read_bytes(path)?;
    if extension(path) == "pfm" || bytes.starts_with(b"Pf") {
        return parse_pfm(&bytes).map_err(|e| e.at(path));
    }
    let img = decode_png(path, &bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_luma16().into_raw();
    Ok(DepthMap::new(w, h, raw.into_iter().map(|v| v as f64 * png_scale).collect()))
}

/// Depth ground truth with the observation mask derived from zero entries.
pub fn read_depth_supervision(path: &Path, png_scale: f64) -> Result<DepthSupervision, IoError> {
    Ok(DepthSupervision::from_depth(read_depth(path, png_scale)?))
}

/// Writes PFM, or a 16-bit PNG storing `round(d / png_scale)` when the extension is `.png`.
pub fn write_depth(path: &Path, depth: &DepthMap, png_scale: f64) -> Result<(), IoError> {
    let bytes = if extension(path) == "png" {
        let raw: Vec<u16> =
            depth.data.iter().map(|&d| (d / png_scale).round().clamp(0.0, u16::MAX as f64) as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw).expect("buffer size matches");
        let mut out = Vec::new();
        image::DynamicImage::ImageLuma16(buf)
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|e| IoError::format(path, e.to_string()))?;
        out
    } else {
        encode_pfm(depth)
    };
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- flow

const FLO_MAGIC: &[u8; 4] = b"PIEH";

pub fn parse_flo(bytes: &[u8]) -> Result<FlowField, ParseError> {
    if bytes.len() < 4 || &bytes[..4] != FLO_MAGIC {
        return Err(ParseError::new(0, "bad magic (expected PIEH)"));
    }
    if bytes.len() < 12 {
        return Err(ParseError::new(bytes.len(), "truncated header"));
    }
    let dim = |at: usize| i32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let (w, h) = (dim(4), dim(8));
    if w <= 0 || h <= 0 {
        return Err(ParseError::new(4, format!("invalid dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + w * h * 8;
    if bytes.len() < need {
        return Err(ParseError::new(bytes.len(), format!("truncated payload: expected {need} bytes")));
    }
    let mut flow = FlowField::zeros(w, h);
    for (i, c) in bytes[12..need].chunks_exact(8).enumerate() {
        flow.u[i] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        flow.v[i] = f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64;
    }
    Ok(flow)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.u.len() * 8);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Reads `(U, V)`; `W` is left at zero.
pub fn read_flo(path: &Path) -> Result<FlowField, IoError> {
    parse_flo(&read_bytes(path)?).map_err(|e| e.at(path))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    write_atomic(path, &encode_flo(flow))
}

/// Hue encodes direction, saturation encodes magnitude relative to the 99th
/// percentile, value is 1. Zero flow maps to white.
pub fn flow_to_color(flow: &FlowField) -> Image {
    let mags: Vec<f64> = flow.u.iter().zip(&flow.v).map(|(u, v)| u.hypot(*v)).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let reference = if sorted.is_empty() {
        0.0
    } else {
        let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        sorted[rank - 1]
    };
    let mut data = Vec::with_capacity(mags.len() * 3);
    for ((u, v), m) in flow.u.iter().zip(&flow.v).zip(&mags) {
        let sat = if reference > 0.0 { (m / reference).min(1.0) } else { 0.0 };
        let hue = v.atan2(*u).to_degrees().rem_euclid(360.0);
        data.extend(hsv_to_rgb(hue, sat, 1.0));
    }
    Image::new(flow.width, flow.height, 3, data)
}

/// Hue of an RGB color in degrees, or `None` for grays.
pub fn rgb_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(60.0 * h)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Writes a soft mask as an 8-bit gray PNG.
pub fn write_mask(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), IoError> {
    write_image(path, &Image::new(width, height, 1, values.to_vec()))
}

/// Reads a gray PNG mask, binarized at 0.5.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), IoError> {
    let img = read_image(path)?;
    let c = img.channels;
    Ok((img.width, img.height, img.data.chunks(c).map(|p| p[0] >= 0.5).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_definition() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend((0..12).map(|i| i as u8 * 20));
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.data[11], 220.0 / 255.0);
    }

    #[test]
    fn ppm_truncated_and_bad_header() {
        let mut bytes = b"P6 2 2 255\n".to_vec();
        bytes.extend([0u8; 11]);
        let err = parse_ppm(&bytes).unwrap_err();
        assert_eq!(err.offset, bytes.len());
        assert_eq!(parse_ppm(b"P5 2 2 255\n").unwrap_err().offset, 0);
        assert_eq!(parse_ppm(b"P6 2 x 255\n").unwrap_err().offset, 5);
    }

    #[test]
    fn flo_size_and_magic() {
        let bytes = encode_flo(&FlowField::zeros(2, 2));
        assert_eq!(bytes.len(), 4 + 4 + 4 + 32);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_flo(&bad).is_err());
        assert_eq!(parse_flo(&bytes).unwrap(), FlowField::zeros(2, 2));
    }

    #[test]
    fn pfm_round_trip() {
        let d = DepthMap::new(3, 2, vec![1.5, 2.25, 3.0, 0.125, 7.0, 99.5]);
        assert_eq!(parse_pfm(&encode_pfm(&d)).unwrap(), d);
    }

    #[test]
    fn color_wheel() {
        let white = flow_to_color(&FlowField::zeros(2, 2));
        assert!(white.data.iter().all(|&v| v == 1.0));
        let mut f = FlowField::zeros(2, 1);
        f.u = vec![1.0, -1.0];
        let img = flow_to_color(&f);
        let h0 = rgb_hue([img.data[0], img.data[1], img.data[2]]).unwrap();
        let h1 = rgb_hue([img.data[3], img.data[4], img.data[5]]).unwrap();
        assert!(((h1 - h0).rem_euclid(360.0) - 180.0).abs() < 1e-9);
    }
}
