//! Binary netpbm codec: P6 (RGB) and P5 (grayscale), maxval 255 only.
//! Chosen as the crate's sole image formats because they round-trip
//! bit-exactly without external decoders; convert PNG sources with e.g.
//! ImageMagick's `convert in.png out.ppm` beforehand.

use std::io::{Read, Write};
use std::path::Path;

use crate::augment::Image;
use crate::error::{Error, Result};

fn format_err(path: &Path, offset: usize, what: &str) -> Error {
    Error::Data(format!("{}: byte {offset}: {what}", path.display()))
}

/// Consume one whitespace-delimited ASCII token starting at `*pos`,
/// skipping `#` comment lines per the netpbm grammar.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
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
        return Err(format_err(path, start, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(tok: &[u8], offset: usize, path: &Path) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, offset, "expected a decimal integer"))
}

/// Load a binary P6 or P5 file as CHW floats in [0,1]. P5 yields a
/// 1-channel image; promote with [`Image::to_rgb`] when RGB is needed.
pub fn load_ppm_pgm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos, path)?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(format_err(path, 0, "bad magic (expected P6 or P5)")),
    };
    let mut offset = pos;
    let width = parse_number(next_token(&bytes, &mut pos, path)?, offset, path)?;
    offset = pos;
    let height = parse_number(next_token(&bytes, &mut pos, path)?, offset, path)?;
    offset = pos;
    let maxval = parse_number(next_token(&bytes, &mut pos, path)?, offset, path)?;
    if maxval != 255 {
        return Err(format_err(path, offset, "only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "missing whitespace before payload"));
    }
    pos += 1;
    let need = channels * height * width;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            &format!("truncated payload: have {} of {need} bytes", payload.len()),
        ));
    }
    // interleaved (HWC) bytes -> planar (CHW) floats
    let mut data = vec![0.0f32; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let byte = payload[(y * width + x) * channels + c];
                data[(c * height + y) * width + x] = byte as f32 / 255.0;
            }
        }
    }
    Image::new(channels, height, width, data)
}

/// Save as P6 (3-channel input) or P5 (1-channel), quantizing [0,1]
/// floats to bytes by round-half-up. Exact 8-bit data round-trips
/// losslessly.
pub fn save_ppm_pgm(path: &Path, image: &Image) -> Result<()> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for y in 0..image.height() {
        for x in 0..image.width() {
            for c in 0..image.channels() {
                let v = (image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
