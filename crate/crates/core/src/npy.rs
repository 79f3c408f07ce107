//! Minimal writer for NumPy `.npy` files (format 1.0, little-endian `f64`).

use std::path::Path;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::synthworld::write_atomic;

pub fn to_bytes(m: &Matrix) -> Vec<u8> {
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        m.rows(),
        m.cols()
    );
    // magic (6) + version (2) + length (2) + header + '\n' must be a multiple of 64.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * m.as_slice().len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn write_f64(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &to_bytes(m))
}
