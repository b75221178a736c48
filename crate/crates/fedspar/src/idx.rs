//! Reader for the IDX files MNIST ships in, raw or gzip-compressed.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use fedspar_core::data::{DataError, LabeledDataset};
use flate2::read::GzDecoder;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: magic number {found:#010x}, expected {expected:#010x}")]
    Magic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: file ends after {got} of {expected} bytes")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("no `{0}` or `{0}.gz` in the dataset directory")]
    Missing(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn read_all(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io { path: path.to_path_buf(), source };
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 * (dims + 1);
    if bytes.len() < need {
        return Err(IdxError::Truncated { path: path.to_path_buf(), expected: need, got: bytes.len() });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(IdxError::Magic { path: path.to_path_buf(), found: word(0), expected: magic });
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

/// Images as rows of pixels scaled to `[0, 1]`, with the image shape.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(Vec<f32>, usize, usize), IdxError> {
    let dims = header(path, bytes, IMAGES_MAGIC, 3)?;
    let (count, pixels) = (dims[0], dims[1] * dims[2]);
    let body = &bytes[16..];
    if body.len() < count * pixels {
        return Err(IdxError::Truncated { path: path.to_path_buf(), expected: 16 + count * pixels, got: bytes.len() });
    }
    let features = body[..count * pixels].iter().map(|&p| p as f32 / 255.0).collect();
    Ok((features, count, pixels))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let count = header(path, bytes, LABELS_MAGIC, 1)?[0];
    let body = &bytes[8..];
    if body.len() < count {
        return Err(IdxError::Truncated { path: path.to_path_buf(), expected: 8 + count, got: bytes.len() });
    }
    Ok(body[..count].to_vec())
}

/// Loads an image file and its label file into a 10-class dataset.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset, IdxError> {
    let (features, count, pixels) = parse_images(images, &read_all(images)?)?;
    let labels = parse_labels(labels, &read_all(labels)?)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch { images: count, labels: labels.len() });
    }
    Ok(LabeledDataset::new(features, labels, pixels, 10)?)
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf, IdxError> {
    [name.to_string(), format!("{name}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| IdxError::Missing(name.to_string()))
}

/// `(train, test)` from a directory with the four standard MNIST files.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset), IdxError> {
    let train = load_idx(&locate(dir, "train-images-idx3-ubyte")?, &locate(dir, "train-labels-idx1-ubyte")?)?;
    let test = load_idx(&locate(dir, "t10k-images-idx3-ubyte")?, &locate(dir, "t10k-labels-idx1-ubyte")?)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn pixel_scaling() {
        let (f, n, p) = parse_images(Path::new("x"), &images(1, 1, 2, &[0, 255])).unwrap();
        assert_eq!((n, p), (1, 2));
        assert_eq!(f, [0.0, 1.0]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let p = Path::new("x");
        assert!(matches!(parse_images(p, &images(2, 1, 2, &[0, 1, 2])), Err(IdxError::Truncated { .. })));
        let mut b = images(1, 1, 1, &[0]);
        b[3] = 0x01;
        assert!(matches!(parse_images(p, &b), Err(IdxError::Magic { found: 0x801, .. })));
        assert!(matches!(parse_labels(p, &[0, 0, 8, 1, 0, 0, 0, 3, 1]), Err(IdxError::Truncated { .. })));
    }
}
