//! 8-bit binary PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::GrayImage;

/// Encodes an image as P5 with maxval 255. Pixels are rounded to 1/255 steps.
pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_num(tok: &str, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PGM {what}: {tok:?}")))
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Format(format!("expected P5 magic, got {magic:?}")));
    }
    let width = parse_num(&next_token(bytes, &mut pos)?, "width")?;
    let height = parse_num(&next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_num(&next_token(bytes, &mut pos)?, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Format(format!(
            "PGM raster truncated: need {n} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raster = &bytes[pos..pos + n];
    if maxval == 255 {
        GrayImage::from_u8(height, width, raster)
    } else {
        let m = maxval as f64;
        GrayImage::from_clamped(
            height,
            width,
            raster.iter().map(|&b| b as f64 / m).collect(),
        )
    }
}

pub fn write(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_after_quantization() {
        let img = GrayImage::from_fn(4, 7, |y, x| ((y * 7 + x) as f64 / 27.0).min(1.0)).unwrap();
        let q = img.quantized_u8();
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back, q);
        assert_eq!(encode(&back), encode(&img));
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n3 3\n255\n\x00\x01").is_err());
        assert!(decode(b"P5\n3").is_err());
    }
}
