//! IDX (FashionMNIST) and CIFAR binary readers.
//!
//! Images come out as `[C, H, W]` arrays in the y-up frame of
//! [`crate::group`]: row 0 is the bottom row of the picture, so the file's
//! first (top) row lands at row `H - 1`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently inflating gzip content.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Converts one `C x H x W` block of top-down bytes to a y-up `[C, H, W]` image.
fn image_from_bytes(bytes: &[u8], c: usize, h: usize, w: usize) -> Array<f32> {
    let mut out = Array::zeros([c, h, w]);
    let data = out.data_mut();
    for ch in 0..c {
        for row in 0..h {
            let src = &bytes[(ch * h + row) * w..][..w];
            let dst = &mut data[(ch * h + (h - 1 - row)) * w..][..w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = f32::from(s) / 255.0;
            }
        }
    }
    out
}

/// Parses an IDX image file (magic 0x00000803) into `[1, rows, cols]` images.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Array<f32>>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("expected IDX image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, format!("empty {rows}x{cols} images")));
    }
    let body = &bytes[16..];
    let per = rows * cols;
    if body.len() < count.saturating_mul(per) {
        return Err(Error::format(
            path,
            format!(
                "truncated: {count} images of {rows}x{cols} need {} bytes, found {}",
                count * per,
                body.len()
            ),
        ));
    }
    Ok(body
        .chunks_exact(per)
        .take(count)
        .map(|b| image_from_bytes(b, 1, rows, cols))
        .collect())
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("expected IDX label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            path,
            format!("truncated: {count} labels, found {} bytes", body.len()),
        ));
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair, gzip'd or raw.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<Sample>> {
    let imgs = parse_idx_images(&read_bytes(images)?, images)?;
    let labs = parse_idx_labels(&read_bytes(labels)?, labels)?;
    if imgs.len() != labs.len() {
        return Err(Error::format(
            labels,
            format!(
                "{} labels for {} images in {}",
                labs.len(),
                imgs.len(),
                images.display()
            ),
        ));
    }
    Ok(imgs
        .into_iter()
        .zip(labs)
        .map(|(image, label)| Sample { image, label })
        .collect())
}

/// Record layout of the CIFAR binary versions.
fn cifar_record(classes: usize) -> Result<(usize, usize)> {
    match classes {
        10 => Ok((3073, 0)),
        // coarse label first, the fine label is used
        100 => Ok((3074, 1)),
        _ => Err(Error::invalid(format!(
            "CIFAR comes with 10 or 100 classes, not {classes}"
        ))),
    }
}

/// Parses CIFAR-10 (`classes = 10`) or CIFAR-100 (`classes = 100`) records.
pub fn parse_cifar(bytes: &[u8], classes: usize, path: &Path) -> Result<Vec<Sample>> {
    let (record, label_at) = cifar_record(classes)?;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
        ));
    }
    let pixels = record - 3072;
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(n, rec)| {
            let label = rec[label_at] as usize;
            if label >= classes {
                return Err(Error::format(
                    path,
                    format!("record {n} has label {label} but only {classes} classes"),
                ));
            }
            Ok(Sample {
                image: image_from_bytes(&rec[pixels..], 3, 32, 32),
                label,
            })
        })
        .collect()
}

/// Loads and concatenates CIFAR binary files.
pub fn load_cifar_binary(paths: &[PathBuf], classes: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for path in paths {
        out.extend(parse_cifar(&read_bytes(path)?, classes, path)?);
    }
    Ok(out)
}
