//! Binary tensor files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BDT1"
//! 4       1     dtype (0 = p32, 1 = p64)
//! 5       1     ndim (always 2)
//! 6       16    rows, cols as u64 little endian
//! 22      ...   row-major little-endian IEEE-754 payload
//! ```

use std::fs;
use std::path::Path;

use bda_core::{Data, Precision, Tensor2D};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"BDT1";
const HEADER_LEN: usize = 4 + 1 + 1 + 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"BDT1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("unsupported ndim {0}, expected 2")]
    BadNdim(u8),
    #[error("zero-size dimension {rows}x{cols}")]
    ZeroDim { rows: u64, cols: u64 },
    #[error("dimensions {rows}x{cols} overflow the addressable size")]
    DimsOverflow { rows: u64, cols: u64 },
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("invalid tensor contents: {0}")]
    Tensor(#[from] bda_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn dtype_code(p: Precision) -> u8 {
    match p {
        Precision::P32 => 0,
        Precision::P64 => 1,
    }
}

pub fn encode(t: &Tensor2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * t.precision().element_size());
    out.extend_from_slice(MAGIC);
    out.push(dtype_code(t.precision()));
    out.push(2);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    match t.data() {
        Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor2D, FormatError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(FormatError::Length {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let precision = match bytes[4] {
        0 => Precision::P32,
        1 => Precision::P64,
        c => return Err(FormatError::BadDtype(c)),
    };
    if bytes[5] != 2 {
        return Err(FormatError::BadNdim(bytes[5]));
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(FormatError::ZeroDim { rows, cols });
    }
    let elem = precision.element_size();
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(elem as u64))
        .and_then(|n| usize::try_from(n).ok())
        .filter(|n| n.checked_add(HEADER_LEN).is_some())
        .ok_or(FormatError::DimsOverflow { rows, cols })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(FormatError::Length {
            expected,
            found: payload.len(),
        });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let t = match precision {
        Precision::P32 => Tensor2D::from_vec(
            rows,
            cols,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?,
        Precision::P64 => Tensor2D::from_vec(
            rows,
            cols,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )?,
    };
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor2D) -> Result<(), FormatError> {
    fs::write(path, encode(t)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_tensor(path: &Path) -> Result<Tensor2D, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
