//! IDX files: a big-endian `u32` magic number and dimension sizes followed
//! by raw unsigned bytes.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use super::LabeledImageDataset;
use crate::error::{io_err, Error, Result};

/// Unsigned-byte data, three dimensions.
pub const IMAGES_MAGIC: u32 = 2051;
/// Unsigned-byte data, one dimension.
pub const LABELS_MAGIC: u32 = 2049;

fn truncated(what: &str) -> io::Error {
    io::Error::new(ErrorKind::UnexpectedEof, format!("truncated IDX {what}"))
}

fn read_u32(bytes: &[u8], at: usize) -> io::Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated("header"))
}

/// Parsed image file: count, rows, columns and raw pixels.
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0).map_err(io_err(path))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<io::Result<_>>()
        .map_err(io_err(path))?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    let need = count * rows * cols;
    if body.len() < need {
        return Err(io_err(path)(truncated("image data")));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0).map_err(io_err(path))?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4).map_err(io_err(path))? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(io_err(path)(truncated("label data")));
    }
    Ok(body[..count].to_vec())
}

/// Loads an MNIST-style image/label pair; raw bytes are scaled by `1/255`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&fs::read(ip).map_err(io_err(ip))?, ip)?;
    let labels = parse_idx_labels(&fs::read(lp).map_err(io_err(lp))?, lp)?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            images.count,
            lp.display(),
            labels.len()
        )));
    }
    let pixels = images.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    LabeledImageDataset::new(1, images.rows, images.cols, pixels, labels.into_iter().map(u32::from).collect())
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let size = rows * cols;
    if size == 0 || pixels.len() % size != 0 {
        return Err(Error::Consistency(format!("{} bytes are not a whole number of {rows}x{cols} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / size) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(io_err(path))
}
