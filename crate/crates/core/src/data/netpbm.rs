//! Binary Netpbm codecs: PPM (P6) colour images, PGM (P5) class masks and
//! PAM (P7) RGBA output.

use std::fs;
use std::path::Path;

use super::{ClassMask, Image};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

/// Parses `magic width height maxval` followed by one whitespace byte.
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected {} file", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            format!("unsupported maxval {maxval} (8-bit only)"),
        ));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let h = parse_header(bytes, b"P6", path)?;
    let n = h.width * h.height;
    let raw = bytes
        .get(h.data_start..h.data_start + 3 * n)
        .ok_or_else(|| Error::format(path, "pixel data is truncated"))?;
    let scale = h.maxval as f64;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = f64::from(px[c]).min(scale) / scale;
        }
    }
    Image::new(3, h.height, h.width, data)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?, path)
}

/// Quantizes to 8 bits; values are clamped to `[0, 1]`.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::Input(format!(
            "PPM needs 3 channels, got {}",
            image.channels
        )));
    }
    let n = image.height * image.width;
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(quantize(image.data[c * n + i]));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_ppm(image)?;
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn decode_pgm_mask(bytes: &[u8], path: &Path) -> Result<ClassMask> {
    let h = parse_header(bytes, b"P5", path)?;
    let raw = bytes
        .get(h.data_start..h.data_start + h.width * h.height)
        .ok_or_else(|| Error::format(path, "pixel data is truncated"))?;
    ClassMask::new(h.height, h.width, raw.to_vec())
}

pub fn read_pgm_mask(path: &Path) -> Result<ClassMask> {
    decode_pgm_mask(&fs::read(path)?, path)
}

/// Class indices are stored verbatim with maxval 2.
pub fn encode_pgm_mask(mask: &ClassMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n2\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

pub fn write_pgm_mask(path: &Path, mask: &ClassMask) -> Result<()> {
    let bytes = encode_pgm_mask(mask);
    write_atomic(path, |w| w.write_all(&bytes))
}

/// Interleaved 8-bit RGBA raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgba {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 4]>,
}

impl Rgba {
    pub fn transparent(width: usize, height: usize) -> Rgba {
        Rgba {
            width,
            height,
            data: vec![[0; 4]; width * height],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 4] {
        self.data[y * self.width + x]
    }
}

pub fn encode_pam(image: &Rgba) -> Vec<u8> {
    let mut out = format!(
        "P7\nWIDTH {}\nHEIGHT {}\nDEPTH 4\nMAXVAL 255\nTUPLTYPE RGB_ALPHA\nENDHDR\n",
        image.width, image.height
    )
    .into_bytes();
    for px in &image.data {
        out.extend_from_slice(px);
    }
    out
}

pub fn decode_pam(bytes: &[u8], path: &Path) -> Result<Rgba> {
    let end = b"ENDHDR\n";
    let header_end = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::format(path, "missing ENDHDR"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format(path, "header is not text"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P7") {
        return Err(Error::format(path, "expected P7 file"));
    }
    let (mut width, mut height, mut depth) = (None, None, None);
    for line in lines {
        let mut parts = line.split_whitespace();
        let key = parts.next();
        let value = parts.next().and_then(|v| v.parse::<usize>().ok());
        match key {
            Some("WIDTH") => width = value,
            Some("HEIGHT") => height = value,
            Some("DEPTH") => depth = value,
            _ => {}
        }
    }
    let (Some(width), Some(height), Some(4)) = (width, height, depth) else {
        return Err(Error::format(path, "only RGBA PAM files are supported"));
    };
    let raw = &bytes[header_end + end.len()..];
    if raw.len() != 4 * width * height {
        return Err(Error::format(path, "pixel data length mismatch"));
    }
    Ok(Rgba {
        width,
        height,
        data: raw
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect(),
    })
}

pub fn read_pam(path: &Path) -> Result<Rgba> {
    decode_pam(&fs::read(path)?, path)
}

pub fn write_pam(path: &Path, image: &Rgba) -> Result<()> {
    let bytes = encode_pam(image);
    write_atomic(path, |w| w.write_all(&bytes))
}
