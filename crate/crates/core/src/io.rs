//! On-disk formats: the `.ct2` binary tensor file and 8-bit binary PGM.
//!
//! `.ct2` layout (all little-endian):
//!
//! | bytes | content                      |
//! |-------|------------------------------|
//! | 4     | magic `b"CT2\0"`             |
//! | 4     | `u32` version, always 1      |
//! | 4     | `u32` height                 |
//! | 4     | `u32` width                  |
//! | 8·h·w | `f64` values, row-major      |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const CT2_MAGIC: [u8; 4] = *b"CT2\0";
pub const CT2_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_ct2(t: &Tensor2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.len());
    out.extend_from_slice(&CT2_MAGIC);
    out.extend_from_slice(&CT2_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.height() as u32).to_le_bytes());
    out.extend_from_slice(&(t.width() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_ct2(bytes: &[u8]) -> Result<Tensor2D> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("ct2: truncated header".into()));
    }
    if bytes[..4] != CT2_MAGIC {
        return Err(Error::Format("ct2: bad magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    let version = word(1);
    if version != CT2_VERSION {
        return Err(Error::Format(format!("ct2: unsupported version {version}")));
    }
    let (h, w) = (word(2) as usize, word(3) as usize);
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("ct2: dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "ct2: expected {expected} bytes for {h}x{w}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor2D::new(h, w, data)
}

pub fn write_ct2(path: impl AsRef<Path>, t: &Tensor2D) -> Result<()> {
    fs::write(path, encode_ct2(t))?;
    Ok(())
}

pub fn read_ct2(path: impl AsRef<Path>) -> Result<Tensor2D> {
    decode_ct2(&fs::read(path)?)
}

/// 8-bit binary PGM; values in `[0, 1]` map linearly to `0..=255` (clamped).
pub fn encode_pgm(t: &Tensor2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor2D> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("pgm: truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("pgm: expected P5, found {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("pgm: bad header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("pgm: only 8-bit maxval supported, got {maxval}")));
    }
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("pgm: truncated raster".into()))?;
    Tensor2D::new(h, w, raster.iter().map(|&b| b as f64 / maxval as f64).collect())
}

pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor2D) -> Result<()> {
    fs::write(path, encode_pgm(t))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor2D> {
    decode_pgm(&fs::read(path)?)
}

/// Load a tensor by extension: `.pgm` as PGM, anything else as `.ct2`.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor2D> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        _ => read_ct2(path),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor2D) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_pgm(path, t),
        _ => write_ct2(path, t),
    }
}

/// Write a file via a sibling temp file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}
