//! IDX files as distributed for MNIST: a big-endian header followed by raw
//! unsigned bytes. Gzip-compressed files are detected by their magic bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32, words: usize) -> Result<Vec<usize>, DataError> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: need,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    Ok((1..words).map(|w| be_u32(bytes, 4 * w) as usize).collect())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let dims = header(path, bytes, IMAGES_MAGIC, 4)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let n = header(path, bytes, LABELS_MAGIC, 2)?[0];
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an image/label file pair. Pixels are scaled by 1/255; the class
/// count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let images = Tensor::new(
        &[n, 1, rows, cols],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
    .map_err(|e| DataError::Invalid(e.to_string()))?;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), classes)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<(), DataError> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("img");
        let labels = dir.join("lbl");
        let pixels: Vec<u8> = (0..8).map(|i| (i * 36) as u8).collect();
        write_idx_images(&images, 2, 2, &pixels).unwrap();
        write_idx_labels(&labels, &[3, 7]).unwrap();
        (images, labels)
    }

    #[test]
    fn two_image_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture(dir.path());
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.classes(), 8);
        let want: Vec<f32> = (0..8).map(|i| (i * 36) as f32 / 255.0).collect();
        assert_eq!(ds.images().data(), want.as_slice());
    }

    #[test]
    fn gzip_is_sniffed() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture(dir.path());
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&fs::read(&images).unwrap()).unwrap();
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&gz, &labels).unwrap(), load_idx(&images, &labels).unwrap());
    }

    #[test]
    fn label_file_with_image_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = fixture(dir.path());
        let err = load_idx(&images, &images).unwrap_err();
        assert!(matches!(
            err,
            DataError::BadMagic { expected: LABELS_MAGIC, found: IMAGES_MAGIC, .. }
        ));
    }

    #[test]
    fn truncation_and_count_mismatch_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture(dir.path());
        let short = dir.path().join("short");
        let bytes = fs::read(&images).unwrap();
        fs::write(&short, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_idx(&short, &labels),
            Err(DataError::Truncated { expected: 24, actual: 23, .. })
        ));
        fs::write(&short, &bytes[..6]).unwrap();
        assert!(matches!(load_idx(&short, &labels), Err(DataError::Truncated { .. })));

        let three = dir.path().join("three");
        write_idx_labels(&three, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_idx(&images, &three),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &labels),
            Err(DataError::Io { .. })
        ));
    }
}
