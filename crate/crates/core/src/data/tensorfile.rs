//! `NFT1` binary tensor container.
//!
//! Record layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "NFT1"
//! dtype   u32      1 = f64
//! rank    u32
//! shape   rank x u64
//! payload product(shape) x f64
//! ```
//!
//! A file may hold several records back to back; model parameter dumps use
//! this to store every tensor of a network in order.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFT1";
pub const DTYPE_F64: u32 = 1;
/// Refuse records larger than this many elements (2 GiB of payload).
const MAX_ELEMENTS: u64 = 1 << 28;

pub fn encode_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

/// Decode one record. `Ok(None)` on a clean end of input.
pub fn decode_tensor<R: Read>(r: &mut R, path: &Path) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    if got == 0 {
        return Ok(None);
    }
    if got < 4 || &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut word = [0u8; 4];
    read_exact_or(r, &mut word, path)?;
    if u32::from_le_bytes(word) != DTYPE_F64 {
        return Err(Error::BadMagic);
    }
    read_exact_or(r, &mut word, path)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::ShapeOverflow(vec![rank as u64]));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut long = [0u8; 8];
    for _ in 0..rank {
        read_exact_or(r, &mut long, path)?;
        dims.push(u64::from_le_bytes(long));
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::ShapeOverflow(dims.clone()))?;
    let mut payload = vec![0u8; count as usize * 8];
    read_exact_or(r, &mut payload, path)?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let shape = dims.into_iter().map(|d| d as usize).collect();
    Tensor::new(shape, data).map(Some)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensors(path, std::slice::from_ref(t))
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        encode_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a single-record file.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut all = read_tensors(path)?;
    match all.len() {
        1 => Ok(all.remove(0)),
        0 => Err(Error::BadMagic),
        n => Err(Error::shape("read_tensor", format!("expected one record, found {n}"))),
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = decode_tensor(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}
