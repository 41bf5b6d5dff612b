//! Binary 8-bit grayscale PGM (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Image;

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Image("malformed PGM header".into()))
}

/// Decode a P5 image; samples are scaled to [0, 1] by the file's maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Image("not a binary PGM (P5) file".into()));
    }
    let mut pos = 2;
    let width = next_token(bytes, &mut pos)?;
    let height = next_token(bytes, &mut pos)?;
    let maxval = next_token(bytes, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Image(format!("unsupported PGM header {width}x{height} maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image("malformed PGM header".into()));
    }
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    let raster = bytes.get(pos..pos + need).ok_or_else(|| Error::Image("PGM raster is truncated".into()))?;
    let scale = maxval as f64;
    let data = if wide {
        raster.chunks_exact(2).map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / scale).collect()
    } else {
        raster.iter().map(|&b| f64::from(b) / scale).collect()
    };
    Image::from_vec(height, width, 1, data)
}

/// 8-bit P5 encoding; values are clamped to [0, 1] and rounded.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Image(format!("PGM holds one channel, image has {}", img.channels())));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

/// Every `.pgm` file in `dir`, sorted by file name.
pub fn read_pgm_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_pgm(&p)?))
        })
        .collect()
}
