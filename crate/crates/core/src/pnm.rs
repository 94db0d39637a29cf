//! Binary PPM (P6) and PGM (P5) support, maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may precede each header token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header number".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after PNM header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero-sized PNM image".into()));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let header = parse_header(bytes, b"P6")?;
    let len = header.width * header.height * 3;
    let raster = bytes
        .get(header.data_offset..header.data_offset + len)
        .ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    ImageTensor::from_rgb8(header.height, header.width, raster)
}

pub fn encode_ppm(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::invalid("PPM output requires 3 channels"));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb8());
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    let len = header.width * header.height;
    let raster = bytes
        .get(header.data_offset..header.data_offset + len)
        .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    LabelMap::new(
        header.height,
        header.width,
        raster.iter().map(|&b| u32::from(b)).collect(),
    )
}

/// Encodes a label map with class index as gray level.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for &l in labels.data() {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)?).map_err(|e| Error::io(path, e))
}
