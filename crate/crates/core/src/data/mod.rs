//! Datasets: MNIST IDX files, spoken-digit WAV recordings turned into MFCC
//! images, synthetic fixtures, and a raw tensor cache format.

mod fixture;
mod fsd;
mod mfcc;
mod mnist;
mod store;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use obfnet_engine::{EngineError, Tensor};
use thiserror::Error;

pub use fixture::{synth_fixture, synth_splits, FixtureKind};
pub use fsd::{load_fsd, read_wav, write_synth_wavs, FsdOptions, FsdReport};
pub use mfcc::{extract_mfcc, Mfcc, MfccConfig};
pub use mnist::{load_idx_images, load_idx_labels, load_idx_pair, load_mnist, MNIST_FILES};
pub use store::{load_dataset, load_splits, save_dataset, save_splits};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated, {needed} bytes needed, {available} present")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{path}: {reason}")]
    Wav { path: PathBuf, reason: String },
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRate { path: PathBuf, found: u32, expected: u32 },
    #[error("empty audio signal")]
    EmptySignal,
    #[error("invalid MFCC configuration: {0}")]
    Config(String),
    #[error("no usable samples: {0}")]
    NoSamples(String),
    #[error("{path}: bad sidecar: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// Samples with their class labels. `samples` has shape `[N, ...sample_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if samples.rank() < 2 {
            return Err(EngineError::InvalidShape(samples.shape().to_vec()).into());
        }
        if samples.batch_size() != labels.len() {
            return Err(DataError::CountMismatch {
                images: samples.batch_size(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            samples,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples.sample_shape()
    }

    /// Samples at `indices`, in that order.
    ///
    /// # Panics
    /// If `indices` is empty or out of range.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// The first `n` samples (all of them when `n >= len`).
    ///
    /// # Panics
    /// If `n == 0`.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            samples: self.samples.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// Written by [`save_splits`].
    Cache,
    /// The four uncompressed MNIST IDX files.
    Mnist,
    /// WAV recordings named `<digit>_*.wav`.
    Fsd,
}

pub fn detect_format(dir: impl AsRef<Path>) -> Option<DataFormat> {
    let dir = dir.as_ref();
    if dir.join("train.json").is_file() {
        return Some(DataFormat::Cache);
    }
    if MNIST_FILES.iter().all(|f| dir.join(f).is_file()) {
        return Some(DataFormat::Mnist);
    }
    let has_wav = std::fs::read_dir(dir).ok()?.flatten().any(|e| {
        e.path()
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
    });
    has_wav.then_some(DataFormat::Fsd)
}

/// Loads whichever of the [`DataFormat`]s `dir` holds. `seed` only matters
/// for the recording split.
pub fn load_dir(dir: impl AsRef<Path>, seed: u64) -> Result<DatasetSplits> {
    let dir = dir.as_ref();
    match detect_format(dir) {
        Some(DataFormat::Cache) => load_splits(dir),
        Some(DataFormat::Mnist) => load_mnist(dir),
        Some(DataFormat::Fsd) => {
            let opts = FsdOptions {
                seed,
                ..FsdOptions::default()
            };
            load_fsd(dir, &opts).map(|(splits, _)| splits)
        }
        None => Err(DataError::NoSamples(format!(
            "{} holds no dataset cache, MNIST files or WAV recordings",
            dir.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_validates_counts_and_labels() {
        let x = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 1], 2, Split::Train),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
        assert!(matches!(
            Dataset::new(x.clone(), vec![0, 1, 2], 2, Split::Train),
            Err(DataError::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let ds = Dataset::new(x, vec![0, 1, 1], 2, Split::Test).unwrap();
        assert_eq!(ds.class_counts(), vec![1, 2]);
        assert_eq!(ds.select(&[2, 0]).labels, vec![1, 0]);
        assert_eq!(ds.take(10).len(), 3);
    }

    #[test]
    fn format_detection() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(detect_format(dir.path()), None);
        assert!(matches!(load_dir(dir.path(), 0), Err(DataError::NoSamples(_))));
        let splits = synth_splits(FixtureKind::MnistLike, 2, 4, 1);
        save_splits(&splits, dir.path()).unwrap();
        assert_eq!(detect_format(dir.path()), Some(DataFormat::Cache));
        assert_eq!(load_dir(dir.path(), 0).unwrap(), splits);
        let wavs = tempfile::tempdir().unwrap();
        write_synth_wavs(wavs.path(), 2, 1, 0, 8000).unwrap();
        assert_eq!(detect_format(wavs.path()), Some(DataFormat::Fsd));
    }

    #[test]
    fn split_names_roundtrip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
    }
}
