//! Little-endian binary record framing shared by the on-disk formats
//! (clouds, episodes, checkpoints). Every record starts with a 4-byte magic
//! and a u32 format version.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file))
}

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<()> {
    w.write_all(magic).map_err(wio)?;
    write_u32(w, version)
}

/// Checks magic and returns the stored version if it is ≤ `max_version`.
pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], max_version: u32, what: &str) -> Result<u32> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(rio)?;
    if &got != magic {
        return Err(Error::format(format!(
            "bad magic for {what}: expected {:?}, found {:?}",
            std::str::from_utf8(magic).unwrap_or("?"),
            got
        )));
    }
    let version = read_u32(r)?;
    if version == 0 || version > max_version {
        return Err(Error::format(format!("unsupported {what} format version {version}")));
    }
    Ok(version)
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(wio)
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(rio)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(wio)
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(rio)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a u64 count that will be used as an allocation size; bounds it to
/// keep corrupt files from requesting absurd allocations.
pub fn read_count<R: Read>(r: &mut R, what: &str, max: u64) -> Result<usize> {
    let v = read_u64(r)?;
    if v > max {
        return Err(Error::format(format!("{what} count {v} exceeds limit {max}")));
    }
    Ok(v as usize)
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(wio)
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(rio)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes()).map_err(wio)?;
    }
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    let mut b = [0u8; 8];
    for v in out.iter_mut() {
        r.read_exact(&mut b).map_err(rio)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(out)
}

pub fn write_bools<W: Write>(w: &mut W, vs: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = vs.iter().map(|&b| b as u8).collect();
    w.write_all(&bytes).map_err(wio)
}

pub fn read_bools<R: Read>(r: &mut R, n: usize) -> Result<Vec<bool>> {
    let mut bytes = vec![0u8; n];
    r.read_exact(&mut bytes).map_err(rio)?;
    bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(format!("bool byte out of range: {other}"))),
        })
        .collect()
}

fn wio(e: std::io::Error) -> Error {
    Error::Io { path: "<write>".into(), source: e }
}

fn rio(e: std::io::Error) -> Error {
    Error::Io { path: "<read>".into(), source: e }
}
