//! Big-endian IDX containers as distributed with MNIST.

use std::fs;
use std::path::Path;

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, format!("truncated while reading {what}")))
}

/// Parse an image file; returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated pixel data: {} of {need} bytes", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format((16 + need) as u64, "trailing bytes after pixel data"));
    }
    Ok((n, rows, cols, body))
}

/// Parse a label file; returns the raw labels.
pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated label data: {} of {n} bytes", body.len()),
        ));
    }
    if body.len() > n {
        return Err(Error::format((8 + n) as u64, "trailing bytes after label data"));
    }
    Ok(body)
}

/// Decode an image/label pair, scaling pixels to `[0, 1]`. Samples have shape
/// `[1, rows, cols]`; the class count is `max(label) + 1`, at least 10.
pub fn decode_idx(images: &[u8], labels: &[u8], source: &str) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let raw = parse_labels(labels)?;
    if raw.len() != n {
        return Err(Error::format(
            4,
            format!("label file holds {} labels for {n} images", raw.len()),
        ));
    }
    let samples = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    LabeledDataset::new(vec![1, rows, cols], samples, labels, classes, source, "pixels/255")
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    decode_idx(&images, &labels, &images_path.display().to_string())
}

/// Encode a dataset whose samples are `[1, rows, cols]` or `[rows, cols]`
/// with values in `[0, 1]`; pixels are rounded to the nearest byte.
pub fn encode_idx(dataset: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match dataset.sample_shape() {
        [1, r, c] | [r, c] => (*r, *c),
        s => return Err(Error::input(format!("IDX images need a 2-d sample shape, got {s:?}"))),
    };
    if dataset.classes() > 256 {
        return Err(Error::input("IDX labels are single bytes"));
    }
    let mut img = Vec::with_capacity(16 + dataset.samples().len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [dataset.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for &x in dataset.samples() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::input(format!("pixel value {x} outside [0, 1]")));
        }
        img.push((x * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels().iter().map(|&y| y as u8));
    Ok((img, lab))
}

pub fn write_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(dataset)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 1, 2, 255, 128, 64, 32, 16]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    #[test]
    fn decodes_hand_built_fixture() {
        let (img, lab) = fixture();
        let d = decode_idx(&img, &lab, "fixture").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.sample_shape(), &[1, 2, 2]);
        assert_eq!(d.sample(0), &[0.0, 1.0 / 255.0, 2.0 / 255.0, 1.0]);
        assert_eq!(d.sample(1), &[128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0, 16.0 / 255.0]);
        assert_eq!(d.labels(), &[7, 3]);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let (mut img, lab) = fixture();
        img[3] = 1;
        assert!(matches!(decode_idx(&img, &lab, ""), Err(Error::Format { offset: 0, .. })));
        let (img, lab) = fixture();
        match decode_idx(&img[..20], &lab, "") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_idx(&img[..10], &lab, ""), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let (img, _) = fixture();
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        assert!(matches!(decode_idx(&img, &lab, ""), Err(Error::Format { .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let (img, lab) = fixture();
        let d = decode_idx(&img, &lab, "fixture").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&d, &ip, &lp).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), img);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.samples(), d.samples());
        assert_eq!(back.labels(), d.labels());
    }
}
