//! IDX reader (`0x00000803` images, `0x00000801` labels), optionally gzipped.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Parses an IDX image file into `(count, pixels_per_item, bytes)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((count, rows * cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(format_err(
            path,
            format!("expected {count} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

/// Loads an image/label pair. Pixel values stay in `[0, 255]`.
pub fn load_idx<T: Scalar>(image_path: &Path, label_path: &Path, split: Split) -> Result<Dataset<T>> {
    let (count, pixels, body) = parse_images(&read_bytes(image_path)?, image_path)?;
    let labels = parse_labels(&read_bytes(label_path)?, label_path)?;
    if labels.len() != count {
        return Err(format_err(
            label_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let features = Matrix::from_vec(count, pixels, body.iter().map(|&b| T::of(f64::from(b))).collect())?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        features,
        labels,
        num_classes,
        split,
    })
}

/// Writes an uncompressed IDX pair; used by tests and fixtures.
pub fn write_idx(image_path: &Path, label_path: &Path, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(pixels);
    fs::write(image_path, img)?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(label_path, lab)?;
    Ok(())
}
