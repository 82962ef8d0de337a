//! Binary 8-bit greyscale PGM (`P5`).

use std::fs;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::tensor::{Real, Tensor};

/// Parses a `P5` file into `1×H×W` values scaled to `[0, 1]`.
pub fn decode_pgm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P5" {
        let what = String::from_utf8_lossy(magic);
        return Err(format_err!("expected a binary greyscale PGM (P5), found `{what}`"));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err!("only 8-bit PGM is supported, maxval is {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err(format_err!("empty {width}×{height} image"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err!("missing separator after PGM header")),
    }
    let raster = &bytes[pos..];
    let n = width * height;
    if raster.len() < n {
        return Err(format_err!("PGM raster truncated: {} of {n} bytes", raster.len()));
    }
    let scale = 1.0 / maxval as f64;
    let data = raster[..n].iter().map(|&b| T::lit(b as f64 * scale)).collect();
    Tensor::new(&[1, height, width], data)
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b == b'#' {
            while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err!("PGM header truncated"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err!("bad PGM {what} `{}`", String::from_utf8_lossy(tok)))
}

fn plane<T: Real>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => Err(format_err!("only single-channel images can be written as PGM, got {:?}", s)),
    }
}

/// Quantizes `H×W` or `1×H×W` values in `[0, 1]` to 8 bits.
pub fn encode_pgm<T: Real>(x: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = plane(x)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(x.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_image<T: Real>(path: &Path, x: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_pgm(x)?)?;
    Ok(())
}

/// Writes a `{0, 1}` mask as a 0/255 PGM.
pub fn save_mask(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let t = Tensor::<f32>::new(&[h, w], mask.iter().map(|&m| if m > 0 { 1.0 } else { 0.0 }).collect())?;
    save_image(path, &t)
}

/// Reads a mask PGM, binarizing at 128 of 255. Returns `(mask, h, w)`.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let t = load_image::<f64>(path)?;
    let (h, w) = (t.shape()[1], t.shape()[2]);
    Ok((t.data().iter().map(|&v| (v * 255.0 >= 127.5) as u8).collect(), h, w))
}
