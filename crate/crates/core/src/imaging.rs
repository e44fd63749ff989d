//! Radiograph decoding and preprocessing.
//!
//! Pipeline: decode (8-bit PNG or binary PGM) → grayscale in [0,1] → centered
//! square crop → bilinear resize to 128×128 → three 64-row lung segments.

use std::fmt;
use std::io::Cursor;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side of the square working image.
pub const FULL_SIDE: usize = 128;
/// Rows in every segment.
pub const SEGMENT_ROWS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImagingError {
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("expected a {expected_w}x{expected_h} image, got {width}x{height}")]
    WrongDimensions {
        expected_w: usize,
        expected_h: usize,
        width: usize,
        height: usize,
    },
}

impl ImagingError {
    /// Stable machine-readable code, used in service error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ImagingError::MalformedImage(_) => "MalformedImage",
            ImagingError::UnsupportedFormat(_) => "UnsupportedFormat",
            ImagingError::WrongDimensions { .. } => "WrongDimensions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Pgm,
}

impl ImageFormat {
    /// Guesses the container from its magic bytes.
    pub fn detect(bytes: &[u8]) -> Option<ImageFormat> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(b"P5") {
            Some(ImageFormat::Pgm)
        } else {
            None
        }
    }
}

impl FromStr for ImageFormat {
    type Err = ImagingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(ImageFormat::Png),
            "pgm" => Ok(ImageFormat::Pgm),
            other => Err(ImagingError::UnsupportedFormat(format!("format {other:?}"))),
        }
    }
}

/// Decoded 8-bit raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// Normalized grayscale raster, samples in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image, clamping samples into [0,1].
    ///
    /// Panics if `data.len() != width * height` or either side is zero.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert!(width >= 1 && height >= 1, "image sides must be positive");
        assert_eq!(data.len(), width * height, "sample count does not match dimensions");
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        GrayImage { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

/// Horizontal lung band of the 128×128 working image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    /// Upper band.
    I,
    /// Lower band.
    II,
    /// Middle band.
    III,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::I, Segment::II, Segment::III];

    pub fn row_range(self) -> Range<usize> {
        match self {
            Segment::I => 0..64,
            Segment::II => 64..128,
            Segment::III => 32..96,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::I => "I",
            Segment::II => "II",
            Segment::III => "III",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The preprocessed radiograph and its three segments.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOutput {
    pub full: GrayImage,
    pub seg1: GrayImage,
    pub seg2: GrayImage,
    pub seg3: GrayImage,
}

impl PreprocessOutput {
    pub fn segment(&self, seg: Segment) -> &GrayImage {
        match seg {
            Segment::I => &self.seg1,
            Segment::II => &self.seg2,
            Segment::III => &self.seg3,
        }
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<RawImage, ImagingError> {
    match format {
        ImageFormat::Png => decode_png(bytes),
        ImageFormat::Pgm => decode_pgm(bytes),
    }
}

fn decode_png(bytes: &[u8]) -> Result<RawImage, ImagingError> {
    use png::{BitDepth, ColorType, Transformations};

    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImagingError::MalformedImage(e.to_string()))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    if info.bit_depth != BitDepth::Eight {
        return Err(ImagingError::UnsupportedFormat(format!(
            "PNG bit depth {:?}, only 8-bit is accepted",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => {
            return Err(ImagingError::UnsupportedFormat(format!(
                "PNG color type {other:?}, only grayscale or RGB is accepted"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImagingError::MalformedImage("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImagingError::MalformedImage(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    if width == 0 || height == 0 || buf.len() != width * height * channels {
        return Err(ImagingError::MalformedImage("PNG frame size mismatch".into()));
    }
    Ok(RawImage {
        width,
        height,
        channels,
        data: buf,
    })
}

fn decode_pgm(bytes: &[u8]) -> Result<RawImage, ImagingError> {
    if !bytes.starts_with(b"P5") {
        return Err(ImagingError::MalformedImage("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(ImagingError::MalformedImage("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImagingError::MalformedImage("non-numeric PGM header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImagingError::MalformedImage("PGM header field out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImagingError::MalformedImage("truncated PGM header".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImagingError::MalformedImage("PGM with zero dimension".into()));
    }
    if maxval != 255 {
        return Err(ImagingError::UnsupportedFormat(format!(
            "PGM maxval {maxval}, only 255 is accepted"
        )));
    }
    let len = width
        .checked_mul(height)
        .ok_or_else(|| ImagingError::MalformedImage("PGM dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < len {
        return Err(ImagingError::MalformedImage(format!(
            "PGM raster truncated: {} of {len} bytes",
            payload.len()
        )));
    }
    Ok(RawImage {
        width,
        height,
        channels: 1,
        data: payload[..len].to_vec(),
    })
}

/// Serializes as binary PGM (P5, maxval 255), sample = round(value·255).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn to_gray(img: &RawImage) -> Result<GrayImage, ImagingError> {
    if img.width == 0 || img.height == 0 || img.data.len() != img.width * img.height * img.channels {
        return Err(ImagingError::MalformedImage("raster size mismatch".into()));
    }
    let data = match img.channels {
        1 => img.data.iter().map(|&v| f64::from(v) / 255.0).collect(),
        3 => img
            .data
            .chunks_exact(3)
            .map(|px| {
                (0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]))
                    / 255.0
            })
            .collect(),
        n => {
            return Err(ImagingError::UnsupportedFormat(format!(
                "{n} channels, expected 1 or 3"
            )))
        }
    };
    Ok(GrayImage::new(img.width, img.height, data))
}

pub fn center_square_crop(img: &GrayImage) -> GrayImage {
    let side = img.width.min(img.height);
    if img.width == img.height {
        return img.clone();
    }
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut data = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        data.extend_from_slice(&img.row(y)[x0..x0 + side]);
    }
    GrayImage::new(side, side, data)
}

/// Bilinear resize with half-pixel centers.
///
/// Panics if either output side is zero.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    assert!(out_w >= 1 && out_h >= 1, "output sides must be positive");
    if out_w == img.width && out_h == img.height {
        return img.clone();
    }
    let xs = sample_positions(img.width, out_w);
    let ys = sample_positions(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, ty) in &ys {
        let (r0, r1) = (img.row(y0), img.row(y1));
        for &(x0, x1, tx) in &xs {
            let top = lerp(r0[x0], r0[x1], tx);
            let bottom = lerp(r1[x0], r1[x1], tx);
            data.push(lerp(top, bottom, ty));
        }
    }
    GrayImage::new(out_w, out_h, data)
}

/// For each output index: (lower source index, upper source index, weight).
fn sample_positions(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn slice_segment(img: &GrayImage, seg: Segment) -> Result<GrayImage, ImagingError> {
    if img.width != FULL_SIDE || img.height != FULL_SIDE {
        return Err(ImagingError::WrongDimensions {
            expected_w: FULL_SIDE,
            expected_h: FULL_SIDE,
            width: img.width,
            height: img.height,
        });
    }
    let rows = seg.row_range();
    let data = img.data[rows.start * FULL_SIDE..rows.end * FULL_SIDE].to_vec();
    Ok(GrayImage::new(FULL_SIDE, SEGMENT_ROWS, data))
}

/// Preprocesses an already-normalized image.
pub fn preprocess_gray(gray: &GrayImage) -> PreprocessOutput {
    let full = resize_bilinear(&center_square_crop(gray), FULL_SIDE, FULL_SIDE);
    let slice = |seg| slice_segment(&full, seg).expect("resized image is 128x128");
    PreprocessOutput {
        seg1: slice(Segment::I),
        seg2: slice(Segment::II),
        seg3: slice(Segment::III),
        full,
    }
}

pub fn preprocess(bytes: &[u8], format: ImageFormat) -> Result<PreprocessOutput, ImagingError> {
    let raw = decode_image(bytes, format)?;
    Ok(preprocess_gray(&to_gray(&raw)?))
}
