//! Named inference and obfuscation architectures.
//!
//! All MNIST networks take `[28, 28]` samples and all FSD networks take
//! `[20, 45]` MFCC images. Convolutional networks start with a reshape to a
//! single channel; dense networks start with a flatten. Neither adds
//! parameters.

use std::fmt;
use std::str::FromStr;

use obfnet_engine::{EngineError, Network, NetworkBuilder, Padding};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown architecture name {0:?}")]
    UnknownArch(String),
    #[error("hidden width must be positive")]
    NonPositiveWidth,
    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchName {
    FsdIc,
    FsdIm,
    FsdOc,
    FsdOm,
    MnistIc,
    MnistIm,
    MnistOc,
    MnistOm,
}

impl ArchName {
    pub const ALL: [ArchName; 8] = [
        ArchName::FsdIc,
        ArchName::FsdIm,
        ArchName::FsdOc,
        ArchName::FsdOm,
        ArchName::MnistIc,
        ArchName::MnistIm,
        ArchName::MnistOc,
        ArchName::MnistOm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::FsdIc => "fsd-ic",
            ArchName::FsdIm => "fsd-im",
            ArchName::FsdOc => "fsd-oc",
            ArchName::FsdOm => "fsd-om",
            ArchName::MnistIc => "mnist-ic",
            ArchName::MnistIm => "mnist-im",
            ArchName::MnistOc => "mnist-oc",
            ArchName::MnistOm => "mnist-om",
        }
    }

    pub fn is_obfnet(self) -> bool {
        matches!(
            self,
            ArchName::FsdOc | ArchName::FsdOm | ArchName::MnistOc | ArchName::MnistOm
        )
    }

    pub fn is_mnist(self) -> bool {
        matches!(
            self,
            ArchName::MnistIc | ArchName::MnistIm | ArchName::MnistOc | ArchName::MnistOm
        )
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArchName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ZooError::UnknownArch(s.to_string()))
    }
}

/// Hidden widths of the MNIST O_M scaling sweep.
pub const MNIST_OM_WIDTHS: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];

pub const MNIST_SHAPE: [usize; 2] = [28, 28];
pub const FSD_SHAPE: [usize; 2] = [20, 45];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: ArchName,
    /// First hidden dense width of the MNIST obfuscation networks.
    pub hidden_width: usize,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(name: ArchName) -> Self {
        let input_shape = if name.is_mnist() {
            MNIST_SHAPE.to_vec()
        } else {
            FSD_SHAPE.to_vec()
        };
        ArchSpec {
            name,
            hidden_width: 128,
            input_shape,
            num_classes: 10,
        }
    }

    pub fn with_hidden_width(mut self, width: usize) -> Self {
        self.hidden_width = width;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.num_classes = classes;
        self
    }

    /// Name stored in model files, e.g. `mnist-om-128`.
    pub fn label(&self) -> String {
        match self.name {
            ArchName::MnistOm | ArchName::MnistOc => format!("{}-{}", self.name, self.hidden_width),
            _ => self.name.to_string(),
        }
    }

    fn validate(&self) -> Result<(usize, usize), ZooError> {
        if self.hidden_width == 0 {
            return Err(ZooError::NonPositiveWidth);
        }
        if !self.name.is_obfnet() && self.num_classes < 2 {
            return Err(ZooError::InvalidSpec("need at least two classes".into()));
        }
        match *self.input_shape.as_slice() {
            [h, w] if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(ZooError::InvalidSpec(format!(
                "input shape must be [height, width], got {:?}",
                self.input_shape
            ))),
        }
    }
}

/// Builds the named architecture with seeded initial weights.
pub fn build(spec: &ArchSpec, seed: u64) -> Result<Network, ZooError> {
    let (h, w) = spec.validate()?;
    let shape = [h, w];
    let classes = spec.num_classes;
    let hidden = spec.hidden_width;
    let b = NetworkBuilder::new(spec.label(), &shape);
    let b = match spec.name {
        ArchName::MnistIc => b
            .reshape(&[1, h, w])
            .conv2d(32, (3, 3), 1, Padding::Valid)
            .relu()
            .conv2d(64, (3, 3), 1, Padding::Valid)
            .relu()
            .max_pool((2, 2), 2, Padding::Valid)
            .dropout(0.25)
            .flatten()
            .dense(128)
            .relu()
            .dropout(0.5)
            .dense(classes)
            .softmax(),
        ArchName::MnistIm => b
            .flatten()
            .dense(512)
            .relu()
            .dense(512)
            .relu()
            .dense(512)
            .relu()
            .dense(classes)
            .softmax(),
        ArchName::MnistOm => b
            .flatten()
            .dense(hidden)
            .relu()
            .dense(h * w)
            .relu()
            .reshape(&shape),
        ArchName::MnistOc => b
            .reshape(&[1, h, w])
            .conv2d(32, (3, 3), 1, Padding::Valid)
            .relu()
            .max_pool((2, 2), 2, Padding::Valid)
            .dropout(0.25)
            .flatten()
            .dense(hidden)
            .relu()
            .dense(h * w)
            .relu()
            .reshape(&shape),
        ArchName::FsdIc => b
            .reshape(&[1, h, w])
            .conv2d(32, (2, 2), 1, Padding::Same)
            .relu()
            .conv2d(48, (3, 3), 1, Padding::Same)
            .relu()
            .conv2d(64, (3, 6), 1, Padding::Same)
            .relu()
            .max_pool((2, 2), 2, Padding::Same)
            .dropout(0.25)
            .flatten()
            .dense(128)
            .relu()
            .dropout(0.1)
            .dense(64)
            .relu()
            .dropout(0.25)
            .dense(classes)
            .softmax(),
        ArchName::FsdIm => b
            .flatten()
            .dense(800)
            .relu()
            .dropout(0.15)
            .dense(300)
            .relu()
            .dropout(0.15)
            .dense(128)
            .relu()
            .dropout(0.1)
            .dense(64)
            .relu()
            .dropout(0.25)
            .dense(classes)
            .softmax(),
        ArchName::FsdOc => b
            .reshape(&[1, h, w])
            .conv2d(3, (2, 4), 1, Padding::Same)
            .batch_norm()
            .relu()
            .conv2d(5, (3, 6), 1, Padding::Same)
            .batch_norm()
            .relu()
            .max_pool((2, 2), 2, Padding::Same)
            .dropout(0.25)
            .flatten()
            .dense(h * w)
            .relu()
            .dropout(0.15)
            .reshape(&shape),
        ArchName::FsdOm => b
            .flatten()
            .dense(200)
            .relu()
            .batch_norm()
            .dense(h * w)
            .relu()
            .batch_norm()
            .reshape(&shape),
    };
    Ok(b.build(seed)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Weight elements, trainable and frozen, excluding batch-norm moving statistics.
    pub params: usize,
    /// Including the moving statistics.
    pub total: usize,
}

pub fn count_params(net: &Network) -> ParamCount {
    ParamCount {
        params: net.param_count(),
        total: net.total_count(),
    }
}
