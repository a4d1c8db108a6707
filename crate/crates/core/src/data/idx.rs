//! IDX files: two zero bytes, a type code, the number of dimensions, then
//! big-endian `u32` extents and a row-major payload. Only unsigned-byte
//! payloads (type `0x08`) are handled.

use std::fs;
use std::path::Path;

use crate::error::{CflError, Result};
use crate::tensor::Tensor;

use super::{Dataset, Inputs};

pub const TYPE_U8: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(CflError::Format("bad IDX magic".into()));
    }
    if bytes[2] != TYPE_U8 {
        return Err(CflError::Format(format!("unsupported IDX type 0x{:02x}", bytes[2])));
    }
    let nd = bytes[3] as usize;
    let header = 4 + 4 * nd;
    if nd == 0 || bytes.len() < header {
        return Err(CflError::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(CflError::Format(format!(
            "IDX payload has {} bytes, header promises {n}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode(a: &IdxArray) -> Result<Vec<u8>> {
    if a.dims.is_empty() || a.dims.len() > 255 {
        return Err(CflError::Format("IDX needs 1..=255 dimensions".into()));
    }
    if a.dims.iter().product::<usize>() != a.data.len() {
        return Err(CflError::Length("IDX dims do not match payload".into()));
    }
    let mut out = vec![0, 0, TYPE_U8, a.dims.len() as u8];
    for &d in &a.dims {
        let d = u32::try_from(d).map_err(|_| CflError::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    Ok(out)
}

/// Images scaled to `[0, 1]` (one flattened image per row) with labels.
pub fn load_idx_images(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse(&fs::read(images)?)?;
    let lab = parse(&fs::read(labels)?)?;
    images_from_arrays(&img, &lab)
}

pub fn images_from_arrays(img: &IdxArray, lab: &IdxArray) -> Result<Dataset> {
    if img.dims.len() < 2 {
        return Err(CflError::Format("image file needs at least 2 dimensions".into()));
    }
    if lab.dims.len() != 1 {
        return Err(CflError::Format("label file must be 1-dimensional".into()));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(CflError::Length(format!("{n} images, {} labels", lab.dims[0])));
    }
    let width = img.data.len() / n.max(1);
    let x = Tensor::matrix(n, width, img.data.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Inputs::Dense(x), labels, classes)
}

/// Writes `n × (rows·cols)` images in `[0, 1]` quantized to bytes.
pub fn write_idx_images(path: &Path, images: &Tensor<f64>, rows: usize, cols: usize) -> Result<()> {
    let (n, w) = images.dims2()?;
    if w != rows * cols {
        return Err(CflError::Shape(format!("row width {w} is not {rows}×{cols}")));
    }
    let data = images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(
        path,
        encode(&IdxArray {
            dims: vec![n, rows, cols],
            data,
        })?,
    )?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let data = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| CflError::Format(format!("label {l} exceeds a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(
        path,
        encode(&IdxArray {
            dims: vec![labels.len()],
            data,
        })?,
    )?;
    Ok(())
}
