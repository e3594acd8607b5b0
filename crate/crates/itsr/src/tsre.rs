//! The `TSRE` embedding container: a 16-byte little-endian header followed
//! by a row-major `f32` payload.
//!
//! ```text
//! "TSRE" | version u16 = 1 | dtype u8 = 0 | reserved u8 = 0 | rows u32 | cols u32 | f32 * rows * cols
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use itsr_core::{Float, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"TSRE";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("{0}")]
    Format(String),
    #[error("truncated payload: header promises {expected} bytes, {found} present")]
    Truncated { expected: usize, found: usize },
}

/// Serializes a 2-D tensor (a 1-D tensor is stored as a single row).
pub fn encode(t: &Tensor) -> Vec<u8> {
    let (rows, cols) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("TSRE holds matrices, got shape {other:?}"),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(0);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(DecodeError::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DecodeError::Format(format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(DecodeError::Format(format!("unsupported dtype {}", bytes[6])));
    }
    if bytes[7] != 0 {
        return Err(DecodeError::Format(format!("reserved byte is {}", bytes[7])));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if rows == 0 || cols == 0 {
        return Err(DecodeError::Format(format!("empty sequence ({rows} x {cols})")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DecodeError::Format("header size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(DecodeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DecodeError::Format(format!("{} trailing bytes", payload.len() - expected)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Float)
        .collect();
    Ok(Tensor::new(&[rows, cols], data).expect("size checked"))
}

pub fn write(path: &Path, t: &Tensor) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| CliError::io(path, e))
}

/// Reads a matrix; truncation is reported as an I/O error, header problems
/// as a format error.
pub fn read(path: &Path) -> CliResult<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        DecodeError::Truncated { .. } => CliError::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, e.to_string())),
        DecodeError::Format(msg) => CliError::format(path, msg),
    })
}

/// Reads a single-row file as a vector.
pub fn read_vector(path: &Path) -> CliResult<Tensor> {
    let t = read(path)?;
    if t.rows() != 1 {
        return Err(CliError::format(path, format!("expected one row, found {}", t.rows())));
    }
    let n = t.cols();
    Ok(Tensor::new(&[n], t.data().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.25, -0.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..16], &[b'T', b'S', b'R', b'E', 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 16 + 24);
        let back = decode(&b).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_bad_headers() {
        let good = encode(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(DecodeError::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(DecodeError::Format(_))));
        let mut bad = good.clone();
        bad[6] = 1;
        assert!(matches!(decode(&bad), Err(DecodeError::Format(_))));
        let mut zero = good.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&zero[..16]), Err(DecodeError::Format(_))));
        assert_eq!(
            decode(&good[..good.len() - 1]),
            Err(DecodeError::Truncated { expected: 8, found: 7 })
        );
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(DecodeError::Format(_))));
    }

    #[test]
    fn file_errors_map_to_io_and_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsre");
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write(&p, &t).unwrap();
        assert_eq!(read(&p).unwrap(), t);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert_eq!(read(&p).unwrap_err().exit_code(), 3);
        assert!(matches!(read(&p).unwrap_err(), CliError::Io { .. }));
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read(&p).unwrap_err(), CliError::Io { .. }));
        std::fs::write(&p, b"NOPE000000000000").unwrap();
        assert!(matches!(read(&p).unwrap_err(), CliError::Format { .. }));
        assert!(matches!(read(&dir.path().join("missing.tsre")).unwrap_err(), CliError::Io { .. }));
    }
}
