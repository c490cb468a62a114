//! IDX container parsing and writing (the MNIST binary layout): big-endian
//! magic and dimension fields, u8 payload. Pixels scale to [0,1] by /255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{Dataset, ModelError};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic 0x{got:08x} at offset 0 of {path} (expected 0x{expected:08x})")]
    BadMagic { path: String, got: u32, expected: u32 },
    #[error("truncated file {path}: expected {expected} payload bytes, found {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Dataset(#[from] ModelError),
}

fn read_u32_be(reader: &mut impl Read, path: &str) -> Result<u32, IdxError> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|source| IdxError::Io {
        path: path.to_string(),
        source,
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an images/labels IDX pair into a Dataset. Class count is taken as
/// max(label) + 1 unless `num_classes` is given.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    num_classes: Option<usize>,
) -> Result<Dataset, IdxError> {
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let mut ir = BufReader::new(File::open(images_path).map_err(|source| IdxError::Io {
        path: ipath.clone(),
        source,
    })?);
    let magic = read_u32_be(&mut ir, &ipath)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            path: ipath,
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = read_u32_be(&mut ir, &ipath)? as usize;
    let h = read_u32_be(&mut ir, &ipath)? as usize;
    let w = read_u32_be(&mut ir, &ipath)? as usize;
    let mut pixels = Vec::new();
    ir.read_to_end(&mut pixels).map_err(|source| IdxError::Io {
        path: ipath.clone(),
        source,
    })?;
    if pixels.len() != n * h * w {
        return Err(IdxError::Truncated {
            path: ipath,
            expected: n * h * w,
            got: pixels.len(),
        });
    }

    let mut lr = BufReader::new(File::open(labels_path).map_err(|source| IdxError::Io {
        path: lpath.clone(),
        source,
    })?);
    let magic = read_u32_be(&mut lr, &lpath)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            path: lpath,
            got: magic,
            expected: LABELS_MAGIC,
        });
    }
    let ln = read_u32_be(&mut lr, &lpath)? as usize;
    let mut raw_labels = Vec::new();
    lr.read_to_end(&mut raw_labels).map_err(|source| IdxError::Io {
        path: lpath.clone(),
        source,
    })?;
    if raw_labels.len() != ln {
        return Err(IdxError::Truncated {
            path: lpath,
            expected: ln,
            got: raw_labels.len(),
        });
    }
    if n != ln {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: ln,
        });
    }

    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |&m| m + 1));
    Ok(Dataset::new(
        Tensor::new(&[n, 1, h, w], data).unwrap(),
        labels,
        classes,
    )?)
}

/// Write a Dataset back out as an IDX images/labels pair (pixels rounded to
/// the nearest u8).
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), IdxError> {
    let shape = data.inputs.shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let ipath = images_path.display().to_string();
    let mut iw = BufWriter::new(File::create(images_path).map_err(|source| IdxError::Io {
        path: ipath.clone(),
        source,
    })?);
    let write = |wtr: &mut BufWriter<File>, bytes: &[u8], path: &str| {
        wtr.write_all(bytes).map_err(|source| IdxError::Io {
            path: path.to_string(),
            source,
        })
    };
    write(&mut iw, &IMAGES_MAGIC.to_be_bytes(), &ipath)?;
    write(&mut iw, &(n as u32).to_be_bytes(), &ipath)?;
    write(&mut iw, &(h as u32).to_be_bytes(), &ipath)?;
    write(&mut iw, &(w as u32).to_be_bytes(), &ipath)?;
    let bytes: Vec<u8> = data
        .inputs
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write(&mut iw, &bytes, &ipath)?;

    let lpath = labels_path.display().to_string();
    let mut lw = BufWriter::new(File::create(labels_path).map_err(|source| IdxError::Io {
        path: lpath.clone(),
        source,
    })?);
    write(&mut lw, &LABELS_MAGIC.to_be_bytes(), &lpath)?;
    write(&mut lw, &(n as u32).to_be_bytes(), &lpath)?;
    let labels: Vec<u8> = data.labels.iter().map(|&l| l as u8).collect();
    write(&mut lw, &labels, &lpath)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("labels.idx");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    fn hand_images() -> Vec<u8> {
        // two 2x2 images: [0,128,255,64] and [1,2,3,4]
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[0, 128, 255, 64, 1, 2, 3, 4]);
        b
    }

    fn hand_labels() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&[7, 3]);
        b
    }

    #[test]
    fn loads_hand_crafted_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &hand_images(), &hand_labels());
        let data = load_idx(&ip, &lp, Some(10)).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.labels, vec![7, 3]);
        let px = data.inputs.to_vec();
        assert_eq!(px[0], 0.0);
        assert!((px[1] - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(px[2], 1.0, "byte 255 scales to exactly 1.0");
        assert!((px[3] - 64.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn wrong_magic_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = hand_images();
        bad[3] = 0x42;
        let (ip, lp) = write_pair(dir.path(), &bad, &hand_labels());
        let err = load_idx(&ip, &lp, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("offset 0") && msg.contains("0x00000842"), "{msg}");
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut short = hand_images();
        short.truncate(short.len() - 3);
        let (ip, lp) = write_pair(dir.path(), &short, &hand_labels());
        assert!(matches!(
            load_idx(&ip, &lp, None),
            Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn image_label_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = hand_labels();
        labels[7] = 3; // claim 3 labels
        labels.push(1);
        let (ip, lp) = write_pair(dir.path(), &hand_images(), &labels);
        assert!(matches!(
            load_idx(&ip, &lp, None),
            Err(IdxError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn round_trip_write_load() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &hand_images(), &hand_labels());
        let data = load_idx(&ip, &lp, Some(10)).unwrap();
        let ip2 = dir.path().join("rt.idx");
        let lp2 = dir.path().join("rt-labels.idx");
        write_idx(&data, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip2).unwrap(), hand_images());
        assert_eq!(std::fs::read(&lp2).unwrap(), hand_labels());
    }
}
