use std::fs;
use std::path::Path;

use obfnet_engine::Tensor;

use super::{DataError, Dataset, DatasetSplits, Result, Split};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Uncompressed IDX file names, in the order train images, train labels,
/// test images, test labels.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn read_idx(path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let found = be_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let dims = (0..rank)
        .map(|i| be_u32(&bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let needed = header + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok((dims, bytes[header..needed].to_vec()))
}

/// Reads an IDX image file as `[N, rows, cols]` with pixels scaled to [0, 1].
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (dims, pixels) = read_idx(path, IMAGES_MAGIC, 3)?;
    if dims.contains(&0) {
        return Err(DataError::NoSamples(format!("{} has a zero dimension", path.display())));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Tensor::new(dims, data)?)
}

/// Reads an IDX label file; every label must be a digit.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let (_, raw) = read_idx(path.as_ref(), LABELS_MAGIC, 1)?;
    raw.iter()
        .map(|&l| {
            if l < 10 {
                Ok(l as usize)
            } else {
                Err(DataError::LabelOutOfRange {
                    label: l as usize,
                    classes: 10,
                })
            }
        })
        .collect()
}

pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    Dataset::new(x, y, 10, split)
}

/// Loads the four MNIST files from `dir`. The last tenth of the training
/// file becomes the validation split (54,000/6,000 for the official files).
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<DatasetSplits> {
    let dir = dir.as_ref();
    let full = load_idx_pair(dir.join(MNIST_FILES[0]), dir.join(MNIST_FILES[1]), Split::Train)?;
    let test = load_idx_pair(dir.join(MNIST_FILES[2]), dir.join(MNIST_FILES[3]), Split::Test)?;
    let n = full.len();
    let n_val = n / 10;
    if n_val == 0 {
        return Err(DataError::NoSamples("training file too small for a validation split".into()));
    }
    let cut = n - n_val;
    let train = full.take(cut);
    let mut validation = full.select(&(cut..n).collect::<Vec<_>>());
    validation.split = Split::Validation;
    Ok(DatasetSplits {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn idx_images(n: usize, rows: usize, cols: usize, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, rows, cols] {
            b.extend_from_slice(&(d as u32).to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(fill));
        b
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn pixels_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img");
        fs::write(&p, idx_images(2, 2, 2, |i| if i % 2 == 0 { 0 } else { 255 })).unwrap();
        let x = load_idx_images(&p).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2]);
        assert_eq!(x.data()[0], 0.0);
        assert_eq!(x.data()[1], 1.0);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");

        fs::write(&lab, idx_labels(&[1, 11])).unwrap();
        assert!(matches!(
            load_idx_labels(&lab),
            Err(DataError::LabelOutOfRange { label: 11, .. })
        ));

        // a label file where images are expected
        assert!(matches!(load_idx_images(&lab), Err(DataError::BadMagic { found: 0x801, .. })));

        let mut short = idx_images(3, 2, 2, |_| 7);
        short.pop();
        fs::write(&img, short).unwrap();
        assert!(matches!(load_idx_images(&img), Err(DataError::Truncated { .. })));

        fs::write(&img, idx_images(3, 2, 2, |_| 7)).unwrap();
        fs::write(&lab, idx_labels(&[1, 2])).unwrap();
        assert!(matches!(
            load_idx_pair(&img, &lab, Split::Test),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn validation_is_last_tenth() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        fs::write(dir.path().join(MNIST_FILES[0]), idx_images(20, 3, 3, |i| (i / 9) as u8)).unwrap();
        fs::write(dir.path().join(MNIST_FILES[1]), idx_labels(&labels)).unwrap();
        fs::write(dir.path().join(MNIST_FILES[2]), idx_images(4, 3, 3, |_| 0)).unwrap();
        fs::write(dir.path().join(MNIST_FILES[3]), idx_labels(&[0, 1, 2, 3])).unwrap();
        let s = load_mnist(dir.path()).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (18, 2, 4));
        assert_eq!(s.validation.labels, vec![8, 9]);
        assert_eq!(s.validation.split, Split::Validation);
        assert!((s.validation.samples.sample(0)[0] - 18.0 / 255.0).abs() < 1e-7);
    }
}
