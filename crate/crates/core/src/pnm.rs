//! Binary PGM (`P5`) and PPM (`P6`) codecs, 8-bit only.
//!
//! Samples map linearly between `0..=maxval` and `[0, 1]`. Writers always
//! emit `maxval = 255` and quantize with round-half-up, so a write/read
//! round trip is exact to within `1/510`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};

/// A decoded PNM raster.
#[derive(Clone, Debug, PartialEq)]
pub enum Pnm {
    Gray(GrayImage),
    Rgb(Image),
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "PNM",
        detail: detail.into(),
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    raster_start: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as usize))
                .ok_or_else(|| malformed(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(malformed(format!("expected {what}")));
        }
        Ok(value)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(malformed("magic must be P5 or P6")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(format!("zero extent {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(malformed("missing whitespace after maxval")),
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        raster_start: cur.pos + 1,
    })
}

/// Decodes a P5 or P6 byte stream. Trailing bytes after the raster are ignored.
pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let h = parse_header(bytes)?;
    let samples = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(h.channels))
        .ok_or_else(|| malformed("image extent overflows"))?;
    let raster = bytes
        .get(h.raster_start..)
        .filter(|r| r.len() >= samples)
        .ok_or_else(|| malformed(format!("raster truncated: need {samples} bytes")))?;
    let scale = h.maxval as f64;
    let mut values = Vec::with_capacity(samples);
    for &b in &raster[..samples] {
        if b as usize > h.maxval {
            return Err(malformed(format!("sample {b} exceeds maxval {}", h.maxval)));
        }
        values.push(b as f64 / scale);
    }
    Ok(match h.channels {
        1 => Pnm::Gray(GrayImage::new(h.height, h.width, values)?),
        _ => Pnm::Rgb(Image::new(h.height, h.width, values)?),
    })
}

/// Round-half-up quantization of a `[0, 1]` value to a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a colour image; grayscale files are rejected.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match decode(&read_bytes(path)?)? {
        Pnm::Rgb(img) => Ok(img),
        Pnm::Gray(_) => Err(Error::Channels { expected: 3, got: 1 }),
    }
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match decode(&read_bytes(path)?)? {
        Pnm::Gray(img) => Ok(img),
        Pnm::Rgb(_) => Err(Error::Channels { expected: 1, got: 3 }),
    }
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_gray(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}
