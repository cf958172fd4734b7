//! ETEN1 binary tensor format.
//!
//! Layout: magic `ETEN1\0` (6 bytes), u8 rank, rank x u32 little-endian
//! dims, then the f32 little-endian payload. Used for embeddings, PCA
//! matrices, and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"ETEN1\0";

pub fn write_eten1_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_eten1_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data("ETEN1: truncated magic at byte offset 0".into()))?;
    if &magic != MAGIC {
        return Err(Error::Data("ETEN1: bad magic at byte offset 0".into()));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|_| Error::Data("ETEN1: truncated rank at byte offset 6".into()))?;
    let rank = rank[0] as usize;
    if rank > 4 {
        return Err(Error::Data(format!("ETEN1: rank {rank} exceeds 4 at byte offset 6")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim).map_err(|_| {
            Error::Data(format!("ETEN1: truncated dims at byte offset {}", 7 + 4 * i))
        })?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let n: usize = shape.iter().product::<usize>().max(1);
    let payload_off = 7 + 4 * rank;
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|_| {
            Error::Data(format!(
                "ETEN1: truncated payload at byte offset {}",
                payload_off + 4 * i
            ))
        })?;
        data.push(f32::from_le_bytes(buf));
    }
    if rank == 0 {
        return Ok(Tensor::scalar(data[0]));
    }
    Tensor::new(shape, data)
}

pub fn write_eten1<P: AsRef<Path>>(path: P, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_eten1_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_eten1<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_eten1_from(&mut r)
}
