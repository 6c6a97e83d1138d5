//! IDX files (the MNIST container format).
//!
//! Layout: a 4-byte big-endian magic `0x0000_08NN` (`08` = unsigned bytes, `NN` =
//! number of dimensions), one 4-byte big-endian size per dimension, then the raw
//! bytes in row-major order. Image files are 3-D (`0x00000803`), label files 1-D
//! (`0x00000801`).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};

pub const LABEL_MAGIC: u32 = 0x0000_0801;
const UBYTE_TYPE: u8 = 0x08;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic 0x{found:08x} at offset {offset}")]
    BadMagic { offset: u64, found: u32 },
    #[error("truncated IDX {section} at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        offset: u64,
        expected: u64,
        actual: u64,
    },
    #[error("{extra} trailing bytes after IDX payload at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label file must be 1-D, found {ndims} dimensions")]
    NotALabelFile { ndims: usize },
    #[error("image file must have at least 2 dimensions, found {ndims}")]
    NotAnImageFile { ndims: usize },
}

/// A decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn magic(&self) -> u32 {
        ((UBYTE_TYPE as u32) << 8) | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Parse one IDX byte buffer.
pub fn read_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    let truncated = |section, offset: usize, expected: usize| IdxError::Truncated {
        section,
        offset: offset as u64,
        expected: expected as u64,
        actual: bytes.len().saturating_sub(offset) as u64,
    };
    let magic_bytes: [u8; 4] = bytes
        .get(0..4)
        .ok_or_else(|| truncated("magic", 0, 4))?
        .try_into()
        .expect("4 bytes");
    let magic = u32::from_be_bytes(magic_bytes);
    if magic_bytes[0] != 0 || magic_bytes[1] != 0 || magic_bytes[2] != UBYTE_TYPE || magic_bytes[3] == 0 {
        return Err(IdxError::BadMagic {
            offset: 0,
            found: magic,
        });
    }
    let ndims = magic_bytes[3] as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(truncated("header", 4, 4 * ndims));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload_len: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() < payload_len {
        return Err(truncated("payload", header_len, payload_len));
    }
    if payload.len() > payload_len {
        return Err(IdxError::TrailingBytes {
            offset: (header_len + payload_len) as u64,
            extra: (payload.len() - payload_len) as u64,
        });
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

fn read_file(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_idx(&bytes)?)
}

/// Load a paired image/label file set. Images are flattened row-major and scaled to
/// `[0, 1]`; the class count is `max(label) + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images.as_ref();
    let img = read_file(images_path)?;
    let lab = read_file(labels.as_ref())?;
    if img.dims.len() < 2 {
        return Err(IdxError::NotAnImageFile {
            ndims: img.dims.len(),
        }
        .into());
    }
    if lab.dims.len() != 1 {
        return Err(IdxError::NotALabelFile {
            ndims: lab.dims.len(),
        }
        .into());
    }
    let count = img.dims[0];
    if lab.dims[0] != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: lab.dims[0],
        }
        .into());
    }
    let example_shape = img.dims[1..].to_vec();
    let dim: usize = example_shape.iter().product();
    let features = Array2::from_shape_vec(
        (count, dim),
        img.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::contract(e.to_string()))?;
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_owned());
    let mut ds = Dataset::new(name, features, labels, num_classes)?;
    ds.example_shape = example_shape;
    ds.normalization = Normalization::UnitInterval;
    Ok(ds)
}

/// Write `dataset` as an IDX image/label pair. Features must be multiples of `1/255`
/// in `[0, 1]` (as produced by [`load_idx`]) and labels must fit in a byte.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let mut data = Vec::with_capacity(dataset.features.len());
    for &x in dataset.features.iter() {
        let b = (x * 255.0).round();
        if !(0.0..=255.0).contains(&b) || (b / 255.0 - x).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "feature {x} is not representable as an IDX byte"
            )));
        }
        data.push(b as u8);
    }
    let mut dims = vec![dataset.len()];
    dims.extend_from_slice(&dataset.example_shape);
    let img = IdxTensor { dims, data };
    let lab_data = dataset
        .labels
        .iter()
        .map(|&y| u8::try_from(y).map_err(|_| Error::contract(format!("label {y} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    let lab = IdxTensor {
        dims: vec![dataset.len()],
        data: lab_data,
    };
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    fs::write(ip, img.to_bytes()).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab.to_bytes()).map_err(|e| Error::io(lp, e))?;
    Ok(())
}
