//! WTNS binary tensor format: magic "WTNS", version byte 1, dtype byte
//! (1 = f32, 2 = f64), rank byte, rank u32 little-endian extents, then the
//! raw little-endian row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use waca_core::Tensor;

use crate::error::WacaError;

pub const MAGIC: [u8; 4] = *b"WTNS";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Writes a tensor as 64-bit WTNS.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F64])?;
    let rank = u8::try_from(t.shape().len()).expect("rank fits in a byte");
    w.write_all(&[rank])?;
    for &e in t.shape() {
        let e = u32::try_from(e).expect("extent fits in u32");
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads either dtype; f32 payloads are widened to f64.
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor, WacaError> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|e| WacaError::Format(format!("truncated WTNS header: {e}")))?;
    if head[..4] != MAGIC {
        return Err(WacaError::Format(format!(
            "bad WTNS magic {:02x?} (expected {:02x?})",
            &head[..4],
            MAGIC
        )));
    }
    if head[4] != VERSION {
        return Err(WacaError::Format(format!("unsupported WTNS version {}", head[4])));
    }
    let dtype = head[5];
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(WacaError::Format(format!("unknown WTNS dtype {dtype}")));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| WacaError::Format(format!("truncated WTNS extents: {e}")))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    if dtype == DTYPE_F64 {
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|e| WacaError::Format(format!("truncated WTNS payload: {e}")))?;
            data.push(f64::from_le_bytes(b));
        }
    } else {
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|e| WacaError::Format(format!("truncated WTNS payload: {e}")))?;
            data.push(f32::from_le_bytes(b) as f64);
        }
    }
    Tensor::from_vec(&shape, data).map_err(|e| WacaError::Format(format!("bad WTNS shape: {e}")))
}

pub fn save(path: &Path, t: &Tensor) -> Result<(), WacaError> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("in-memory write");
    std::fs::write(path, buf).map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Tensor, WacaError> {
    let bytes = std::fs::read(path)
        .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(WacaError::Format(format!(
            "{}: {} trailing bytes after tensor payload",
            path.display(),
            cursor.len()
        )));
    }
    Ok(t)
}
