//! Binary PPM (`P6`) and PGM (`P5`) with 8-bit samples.

use std::fs;
use std::path::Path;

use contextnet_core::data::{LabelMap, RgbImage};

use crate::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("header number too large at byte {start}"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("zero dimension {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    Ok(Header { width, height, data_start: pos })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize, what: &str) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(Error::Pnm(format!("{what}: truncated pixel data ({} of {need} bytes)", data.len())));
    }
    Ok(&data[..need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6").map_err(|e| Error::Pnm(format!("ppm: {e}")))?;
    let data = payload(bytes, &h, 3, "ppm")?.to_vec();
    Ok(RgbImage::new(h.height, h.width, data)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5").map_err(|e| Error::Pnm(format!("pgm: {e}")))?;
    let data = payload(bytes, &h, 1, "pgm")?.to_vec();
    Ok(LabelMap::new(h.height, h.width, data)?)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.data());
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?).map_err(|e| e.in_file(path))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read(path)?).map_err(|e| e.in_file(path))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}
