//! Binary parameter archive.
//!
//! All integers little-endian:
//!
//! ```text
//! magic     8 bytes  "CGPFCKPT"
//! version   u32      1
//! manifest  u64 length, then UTF-8 JSON
//! count     u32      number of tensors
//! per tensor, in name order:
//!   name    u32 length, then UTF-8
//!   rows    u32
//!   cols    u32
//!   frozen  u8 (0 or 1)
//!   step    u64      Adam step count
//!   value   rows*cols f32
//!   m       rows*cols f32
//!   v       rows*cols f32
//! ```

use std::io::{Read, Write};

use super::params::{Param, ParamStore};
use super::tensor::Tensor;
use crate::error::CheckpointError;

pub const MAGIC: &[u8; 8] = b"CGPFCKPT";
pub const VERSION: u32 = 1;

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes a manifest and every parameter of `store`.
pub fn encode(manifest: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        out.push(p.frozen as u8);
        out.extend_from_slice(&p.step.to_le_bytes());
        put_f32s(&mut out, &p.value);
        put_f32s(&mut out, &p.m);
        put_f32s(&mut out, &p.v);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor, CheckpointError> {
        let bytes = self.take(rows * cols * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Tensor::from_vec(rows, cols, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

/// Inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(String, ParamStore), CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mlen = c.u64()? as usize;
    let manifest = c.string(mlen)?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = c.string(nlen)?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let frozen = match c.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Corrupt(format!("frozen flag {b} for `{name}`"))),
        };
        let step = c.u64()?;
        let value = c.tensor(rows, cols)?;
        let m = c.tensor(rows, cols)?;
        let v = c.tensor(rows, cols)?;
        store.insert_param(name, Param { value, frozen, m, v, step });
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((manifest, store))
}

pub fn write(w: &mut impl Write, manifest: &str, store: &ParamStore) -> Result<(), CheckpointError> {
    w.write_all(&encode(manifest, store))?;
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<(String, ParamStore), CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Rounds every stored tensor through 32-bit storage precision.
pub fn quantize(store: &mut ParamStore) {
    let (_, q) = decode(&encode("", store)).expect("own encoding decodes");
    *store = q;
}
