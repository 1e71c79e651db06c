//! IDX files as distributed for MNIST: a big-endian header followed by raw
//! unsigned bytes. Only the two layouts MNIST uses are accepted: rank-3
//! `u8` images and rank-1 `u8` labels.

use std::fs;
use std::path::Path;

use super::{Dataset, TargetMode};
use crate::error::{Error, Result};
use crate::noise::one_hot;
use crate::tensor::Matrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

const NUM_CLASSES: usize = 10;

/// Header and pixel payload of an image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdxImages<'a> {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: &'a [u8],
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn check_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let want = magic.to_be_bytes();
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "file ends inside the magic number"));
    }
    if let Some(i) = (0..4).find(|&i| bytes[i] != want[i]) {
        return Err(parse_err(
            i,
            format!(
                "bad magic {:#010x}, expected {magic:#010x}",
                u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
            ),
        ));
    }
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<usize> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| parse_err(bytes.len(), "truncated header"))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

/// Payload length must match the header exactly; trailing bytes are an
/// error as well as missing ones.
fn payload(bytes: &[u8], start: usize, len: Option<usize>) -> Result<&[u8]> {
    let len = len.ok_or_else(|| parse_err(4, "dimensions overflow"))?;
    let end = start
        .checked_add(len)
        .ok_or_else(|| parse_err(4, "dimensions overflow"))?;
    match bytes.len().cmp(&end) {
        std::cmp::Ordering::Less => Err(parse_err(
            bytes.len(),
            format!("truncated: header promises {len} data bytes"),
        )),
        std::cmp::Ordering::Greater => Err(parse_err(
            end,
            format!("{} bytes after the data", bytes.len() - end),
        )),
        std::cmp::Ordering::Equal => Ok(&bytes[start..]),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages<'_>> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)?;
    let rows = read_u32(bytes, 8)?;
    let cols = read_u32(bytes, 12)?;
    if rows == 0 || cols == 0 {
        return Err(parse_err(8, format!("empty image shape {rows}x{cols}")));
    }
    let len = count.checked_mul(rows).and_then(|v| v.checked_mul(cols));
    let pixels = payload(bytes, 16, len)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Labels must be digits below 10.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)?;
    let labels = payload(bytes, 8, Some(count))?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(parse_err(8 + i, format!("label {} out of range", labels[i])));
    }
    Ok(labels)
}

/// Dataset from in-memory image and label files. Nothing is allocated for
/// the features until both headers have been validated.
pub fn parse_idx(images: &[u8], labels: &[u8], name: &str, provenance: &str) -> Result<Dataset> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            img.count,
            lab.len()
        )));
    }
    let features = Matrix::new(
        img.count,
        img.rows * img.cols,
        img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let classes: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    Dataset::new(
        name,
        provenance,
        TargetMode::Multiclass,
        features,
        one_hot(&classes, NUM_CLASSES),
    )
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Named after the image file stem, with both paths as provenance.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    parse_idx_images(&images).map_err(|e| with_path(images_path, e))?;
    parse_idx_labels(&labels).map_err(|e| with_path(labels_path, e))?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    let provenance = format!("idx:{},{}", images_path.display(), labels_path.display());
    parse_idx(&images, &labels, &name, &provenance)
}

/// Writes a multiclass dataset whose pixels are exact multiples of 1/255.
/// Square feature vectors become square images, anything else a single row.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let classes = dataset.classes()?;
    if dataset.num_outputs() != NUM_CLASSES {
        return Err(Error::invalid(format!(
            "IDX labels need {NUM_CLASSES} classes, got {}",
            dataset.num_outputs()
        )));
    }
    let d = dataset.feature_dim();
    let side = (d as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == d { (side, side) } else { (1, d) };
    let n = u32::try_from(dataset.len()).map_err(|_| Error::invalid("too many examples for IDX"))?;
    let (r, c) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => return Err(Error::invalid("image too large for IDX")),
    };

    let mut img = Vec::with_capacity(16 + dataset.len() * d);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [n, r, c] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in dataset.features().data() {
        let p = (v * 255.0).round();
        if p / 255.0 != v {
            return Err(Error::invalid(format!("pixel {v} is not a multiple of 1/255")));
        }
        img.push(p as u8);
    }

    let mut lab = Vec::with_capacity(8 + classes.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(classes.iter().map(|&c| c as u8));

    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}
