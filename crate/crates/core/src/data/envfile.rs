//! Raw environment-field blobs.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   b"PDEF"
//! version u32 = 1
//! C, H, W u32 each
//! count   u64
//! data    count·C·H·W f32, field-major then channel, row, column
//! ```
//!
//! Fields are stored in the row order of the companion best-track CSV; kind
//! (historical/future) is assigned when windows are cut, not stored.

use std::io::{Read, Write};

use crate::data::{EnvField, FieldKind};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDEF";
pub const VERSION: u32 = 1;

pub fn write_env_fields<W: Write>(fields: &[&EnvField], mut w: W) -> Result<()> {
    let (c, h, wd) = fields.first().map_or((0, 0, 0), |f| f.dims());
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in [c, h, wd] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(fields.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(c * h * wd * 4);
    for f in fields {
        if f.dims() != (c, h, wd) {
            return Err(Error::EnvFile("fields in one file must share C, H, W".into()));
        }
        buf.clear();
        for v in f.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::EnvFile(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

/// Reads fields; `times` supplies one time stamp per field.
pub fn read_env_fields<R: Read>(mut r: R, times: &[i64]) -> Result<Vec<EnvField>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::EnvFile(format!("bad magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    read_exact(&mut r, &mut u32b, "version")?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::EnvFile(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        read_exact(&mut r, &mut u32b, "header")?;
        *d = u32::from_le_bytes(u32b) as usize;
    }
    let mut u64b = [0u8; 8];
    read_exact(&mut r, &mut u64b, "count")?;
    let count = u64::from_le_bytes(u64b) as usize;
    if count != times.len() {
        return Err(Error::EnvFile(format!("{count} fields for {} observations", times.len())));
    }
    let [c, h, w] = dims;
    let n = c * h * w;
    let mut raw = vec![0u8; n * 4];
    let mut out = Vec::with_capacity(count);
    for &t in times {
        read_exact(&mut r, &mut raw, "field data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(EnvField::new(FieldKind::Historical, t, c, h, w, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let a = EnvField::new(FieldKind::Historical, 3, 2, 2, 2, (0..8).map(|v| v as f32 * 0.5).collect());
        let b = EnvField::new(FieldKind::Historical, 4, 2, 2, 2, (0..8).map(|v| -(v as f32)).collect());
        let mut bytes = Vec::new();
        write_env_fields(&[&a, &b], &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PDEF");
        let back = read_env_fields(&bytes[..], &[3, 4]).unwrap();
        assert_eq!(back, vec![a, b]);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_env_fields(cut, &[3, 4]), Err(Error::EnvFile(_))));
        assert!(read_env_fields(&bytes[..], &[3]).is_err());
    }
}
