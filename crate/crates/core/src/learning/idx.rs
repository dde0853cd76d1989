//! IDX tensor files (the MNIST distribution format).
//!
//! Layout: two zero bytes, a type code, the number of dimensions, then one
//! big-endian `u32` per dimension followed by the raw big-endian payload.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn element_size(code: u8) -> Result<usize> {
    match code {
        0x08 | 0x09 => Ok(1),
        0x0B => Ok(2),
        0x0C | 0x0D => Ok(4),
        0x0E => Ok(8),
        other => Err(Error::Dataset(format!("unknown IDX type code 0x{other:02x}"))),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset("bad IDX magic".into()));
    }
    let code = bytes[2];
    let ndims = bytes[3] as usize;
    let size = element_size(code)?;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Dataset("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * size {
        return Err(Error::Dataset(format!(
            "IDX payload has {} bytes, expected {}",
            payload.len(),
            count * size
        )));
    }
    let data = payload
        .chunks_exact(size)
        .map(|c| match code {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            0x0D => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]),
        })
        .collect();
    Ok(IdxArray { dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Encode `u8` data as an IDX file (type 0x08).
pub fn encode_idx_u8(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Images and labels as a dataset; pixels divided by `pixel_scale`. At most
/// `limit` samples are kept (from the front).
pub fn load_idx_dataset(images: &Path, labels: &Path, limit: Option<usize>, pixel_scale: f64) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.is_empty() || lab.dims.len() != 1 {
        return Err(Error::Dataset("expected an image tensor and a label vector".into()));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", lab.dims[0])));
    }
    let dim: usize = img.dims[1..].iter().product();
    let keep = limit.map_or(n, |l| l.min(n));
    let labels: Vec<usize> = lab.data[..keep].iter().map(|&v| v as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = img.data[..keep * dim].iter().map(|v| v / pixel_scale).collect();
    Dataset::new(features, labels, dim, num_classes.max(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_u8() {
        let bytes = encode_idx_u8(&[2, 3], &[1, 2, 3, 4, 5, 255]);
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 3]);
        assert_eq!(arr.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 255.0]);
    }

    #[test]
    fn big_endian_i32() {
        let mut bytes = vec![0, 0, 0x0C, 1, 0, 0, 0, 2];
        bytes.extend_from_slice(&(-7i32).to_be_bytes());
        bytes.extend_from_slice(&(65536i32).to_be_bytes());
        assert_eq!(parse_idx(&bytes).unwrap().data, vec![-7.0, 65536.0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_idx(&[1, 0, 8, 1]).is_err());
        assert!(parse_idx(&[0, 0, 0x42, 1, 0, 0, 0, 0]).is_err());
        let mut bytes = encode_idx_u8(&[4], &[1, 2, 3, 4]);
        bytes.pop();
        assert!(parse_idx(&bytes).is_err());
    }
}
