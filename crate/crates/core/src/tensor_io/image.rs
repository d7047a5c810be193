//! Raster images: PNG (read/write) and binary PPM `P6` (read/write).
//!
//! PNG output uses one fixed encoder configuration: 8-bit RGB, `Balanced`
//! deflate, `Sub` row filter, no ancillary chunks. The same pixels always
//! encode to the same bytes.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported image format: {0}")]
    UnsupportedImageFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidRaster(format!(
                "{width}x{height} has zero area"
            )));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| ImageError::InvalidRaster("dimensions overflow".into()))?;
        if pixels.len() != expected {
            return Err(ImageError::InvalidRaster(format!(
                "{width}x{height} needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Decodes PNG or P6 PPM, sniffing the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(ImageError::UnsupportedImageFormat(format!(
            "netpbm variant P{} (only P6 is supported)",
            bytes[1] as char
        )))
    } else {
        Err(ImageError::UnsupportedImageFormat(
            "unrecognized signature".into(),
        ))
    }
}

pub fn read_image(path: &Path) -> Result<RasterImage, ImageError> {
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

/// Writes PNG or PPM depending on the file extension.
pub fn write_image(img: &RasterImage, path: &Path) -> Result<(), ImageError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img),
        Some("ppm") => encode_ppm(img),
        other => {
            return Err(ImageError::UnsupportedImageFormat(format!(
                "cannot infer output format from extension {other:?}"
            )))
        }
    };
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_png(img: &RasterImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_compression(png::Compression::Balanced);
        encoder.set_filter(png::Filter::Sub);
        let mut writer = encoder
            .write_header()
            .expect("writing to a Vec cannot fail");
        writer
            .write_image_data(&img.pixels)
            .expect("pixel buffer length is a RasterImage invariant");
        writer.finish().expect("writing to a Vec cannot fail");
    }
    out
}

fn decode_png(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    let corrupt = |e: png::DecodingError| ImageError::CorruptImage(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::CorruptImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedImageFormat(format!(
            "PNG bit depth {:?}",
            info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(ImageError::UnsupportedImageFormat(format!(
                "PNG color type {other:?}"
            )))
        }
    };
    let mut pixels = Vec::with_capacity(width * height * 3);
    for row in buf.chunks(info.line_size).take(height) {
        for px in row[..width * stride].chunks_exact(stride) {
            match stride {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    RasterImage::new(width, height, pixels)
}

fn decode_ppm(bytes: &[u8]) -> Result<RasterImage, ImageError> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(b'0'..=b'9')) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::CorruptImage("malformed PPM header".into()))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::CorruptImage("malformed PPM header".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::UnsupportedImageFormat(format!(
            "PPM maxval {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::CorruptImage("PPM with zero area".into()));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ImageError::CorruptImage("PPM dimensions overflow".into()))?;
    let data = bytes
        .get(pos..)
        .filter(|d| d.len() >= len)
        .ok_or_else(|| ImageError::CorruptImage("PPM pixel data truncated".into()))?;
    RasterImage::new(width, height, data[..len].to_vec())
}
