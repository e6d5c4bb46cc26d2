//! Portable FloatMap reading and writing.
//!
//! Layout: `Pf` (one channel) or `PF` (three channels), then `width height`,
//! then the scale line `-1.0` (negative = little-endian), then raw `f32`
//! samples with the bottom row first.

use std::fs;
use std::path::Path;

use super::grid::Grid;
use crate::error::{Error, Result};

pub fn encode_pfm(g: &Grid) -> Result<Vec<u8>> {
    let tag = match g.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidArgument(format!("PFM stores 1 or 3 channels, grid has {c}"))),
    };
    let (h, w, c) = (g.height(), g.width(), g.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for y in (0..h).rev() {
        let row = &g.data()[y * w * c..(y + 1) * w * c];
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "PFM", detail: detail.into() }
}

/// Splits off one whitespace-terminated ASCII token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| bad("non-ASCII header"))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Grid> {
    let mut pos = 0;
    let c = match token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(bad(format!("unknown magic {other:?}"))),
    };
    let w: usize = token(bytes, &mut pos)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(bytes, &mut pos)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(bytes, &mut pos)?.parse().map_err(|_| bad("bad scale"))?;
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let little = scale < 0.0;
    let need = h * w * c * 4;
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated samples"))?;
    let mut data = vec![0.0; h * w * c];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row_from_bottom, rest) = (i / (w * c), i % (w * c));
        let y = h - 1 - row_from_bottom;
        data[y * w * c + rest] = v as f64;
    }
    Grid::from_vec(h, w, c, data)
}

pub fn write_pfm(path: &Path, g: &Grid) -> Result<()> {
    let bytes = encode_pfm(g)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}
