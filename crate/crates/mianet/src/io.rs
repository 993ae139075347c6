//! On-disk formats: MIAT tensor files and binary PGM images.
//!
//! MIAT layout: magic `4D 49 41 54`, u32 little-endian rank, rank u32
//! little-endian dims, then `product(dims)` f32 little-endian row-major values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

pub const MIAT_MAGIC: [u8; 4] = *b"MIAT";

pub fn write_miat<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&MIAT_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_miat<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MIAT_MAGIC {
        return Err(Error::Format(format!("bad MIAT magic {magic:02X?}")));
    }
    let rank = read_u32(r)? as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format(format!("MIAT rank {rank} outside 1-4")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_miat(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_miat(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_miat(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_miat(&mut bytes.as_slice())
}

/// Writes an 8-bit binary PGM (P5). Values are clamped to `[0,1]` and scaled
/// by 255; masks therefore round-trip as 0/255.
pub fn write_pgm<W: Write>(w: &mut W, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Format("PGM size mismatch".into()));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM into `(height, width, values in [0,1])`.
pub fn read_pgm<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // header: magic, width, height, maxval separated by whitespace, with
    // optional `#` comment lines
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::Format("non-UTF8 PGM header".into()))?
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("unsupported PGM magic {}", fields[0])));
    }
    let width: usize = fields[1].parse().map_err(|_| Error::Format("bad PGM width".into()))?;
    let height: usize = fields[2].parse().map_err(|_| Error::Format("bad PGM height".into()))?;
    let maxval: usize = fields[3].parse().map_err(|_| Error::Format("bad PGM maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::Format("truncated PGM payload".into()));
    }
    let values = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok((height, width, values))
}

pub fn save_mask_pgm(path: &Path, m: &BinaryMask) -> Result<()> {
    let values: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let mut buf = Vec::new();
    write_pgm(&mut buf, m.height(), m.width(), &values)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path)?;
    let (h, w, values) = read_pgm(&mut bytes.as_slice())?;
    let data = values.iter().map(|&v| u8::from(v >= 0.5)).collect();
    BinaryMask::new(h, w, data)
}

/// Dumps a `[h,w]` map in `[0,1]` as a grayscale PGM.
pub fn save_map_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "PGM map expects [h,w], got {:?}",
            map.shape()
        )));
    };
    let mut buf = Vec::new();
    write_pgm(&mut buf, h, w, map.data())?;
    fs::write(path, buf)?;
    Ok(())
}
