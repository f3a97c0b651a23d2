//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"FCMCKPT1"
//! repeated until EOF, one record per parameter in store order:
//!   u32      id length in bytes
//!   [u8]     id, UTF-8
//!   u32      rank
//!   u64*rank dims
//!   f64*n    values, row-major, n = product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FCMCKPT1";

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for p in store.iter() {
        w.write_all(&(p.id.len() as u32).to_le_bytes())?;
        w.write_all(p.id.as_bytes())?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = buf
        .get(*pos..*pos + n)
        .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
    *pos += n;
    Ok(s)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
    if buf.len() < 8 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut pos = 8;
    let mut store = ParamStore::new();
    while pos < buf.len() {
        let n = u32::from_le_bytes(take(&buf, &mut pos, 4)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(&buf, &mut pos, n)?)
            .map_err(|_| Error::Format("parameter id is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&buf, &mut pos, 4)?.try_into().unwrap()) as usize;
        let dims = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(&buf, &mut pos, 8)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = take(&buf, &mut pos, len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.add(id, Tensor::new(dims, data)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + store.n_scalars() * 8);
    write_checkpoint(store, &mut bytes).expect("write to vec");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
