//! The `ONET` model file format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "ONET"            4 bytes magic
//! version           u16 (= 1)
//! name_len, name    u16, UTF-8 bytes
//! input rank, dims  u8, u32 × rank (per-sample input shape)
//! layer_count       u16
//! layer × layer_count:
//!     tag           u8  (1 dense, 2 conv2d, 3 maxpool2d, 4 batchnorm, 5 dropout,
//!                        6 relu, 7 softmax, 8 flatten, 9 reshape)
//!     flags         u8  (bit 0: trainable)
//!     hyperparams   per tag, see below
//!     tensors       params then buffers: rank u8, dims u32 × rank, f32 × product
//! crc32             u32 over every preceding byte
//! ```
//!
//! Hyperparameter blocks:
//!
//! | tag | fields |
//! |-----|--------|
//! | 1 | in u32, out u32 |
//! | 2 | in_ch u32, out_ch u32, kh u32, kw u32, stride u32, padding u8 (0 valid, 1 same) |
//! | 3 | ph u32, pw u32, stride u32, padding u8 |
//! | 4 | channels u32, momentum f32, epsilon f32 |
//! | 5 | rate f32 |
//! | 6, 7, 8 | none |
//! | 9 | rank u8, dims u32 × rank |
//!
//! Dense stores `[W (in, out), b (out)]`, conv2d `[K (out_ch, in_ch, kh, kw), b (out_ch)]`,
//! batchnorm `[gamma, beta]` followed by the buffers `[moving_mean, moving_var]`.

use std::fs;
use std::io;
use std::path::Path;

use obfnet_engine::{Layer, LayerKind, Network, Padding, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ONET";
pub const VERSION: u16 = 1;

/// Decimal units, as used for network transfer sizes.
pub const KB: f64 = 1e3;
pub const MB: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("bad magic {0:?}, expected \"ONET\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("file truncated: {needed} bytes needed, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown layer tag {0}")]
    UnknownTag(u8),
    #[error("network contains non-finite values")]
    NonFinite,
    #[error("transfer rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ModelIoError {
    /// Stable identifier for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            ModelIoError::BadMagic(_) => "bad-magic",
            ModelIoError::UnsupportedVersion(_) => "unsupported-version",
            ModelIoError::Crc { .. } => "crc-mismatch",
            ModelIoError::Truncated { .. } => "truncated",
            ModelIoError::ShapeMismatch(_) => "shape-mismatch",
            ModelIoError::UnknownTag(_) => "unknown-tag",
            ModelIoError::NonFinite => "non-finite",
            ModelIoError::NonPositiveRate(_) => "bad-rate",
            ModelIoError::Io(_) => "io",
        }
    }
}

type Result<T> = std::result::Result<T, ModelIoError>;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u16).to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d);
        }
    }
    fn padding(&mut self, p: Padding) {
        self.u8(match p {
            Padding::Valid => 0,
            Padding::Same => 1,
        });
    }
    fn tensor(&mut self, t: &Tensor) {
        self.dims(t.shape());
        self.0.reserve(t.len() * 4);
        for &v in t.data() {
            self.f32(v);
        }
    }
}

fn check_fits(net: &Network) -> Result<()> {
    let too_big = |what: &str, v: usize, max: usize| {
        if v > max {
            Err(ModelIoError::ShapeMismatch(format!("{what} {v} exceeds format limit {max}")))
        } else {
            Ok(())
        }
    };
    too_big("name length", net.name().len(), u16::MAX as usize)?;
    too_big("layer count", net.len(), u16::MAX as usize)?;
    too_big("input rank", net.input_shape().len(), u8::MAX as usize)?;
    Ok(())
}

fn tag(kind: &LayerKind) -> u8 {
    match kind {
        LayerKind::Dense { .. } => 1,
        LayerKind::Conv2D { .. } => 2,
        LayerKind::MaxPool2D { .. } => 3,
        LayerKind::BatchNorm { .. } => 4,
        LayerKind::Dropout { .. } => 5,
        LayerKind::ReLU => 6,
        LayerKind::Softmax => 7,
        LayerKind::Flatten => 8,
        LayerKind::Reshape { .. } => 9,
    }
}

/// Serializes a network to bytes, CRC included.
pub fn encode(net: &Network) -> Result<Vec<u8>> {
    if !net.is_finite() {
        return Err(ModelIoError::NonFinite);
    }
    check_fits(net)?;
    let mut w = Writer(Vec::with_capacity(64 + net.total_count() * 4));
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION as usize);
    w.u16(net.name().len());
    w.0.extend_from_slice(net.name().as_bytes());
    w.dims(net.input_shape());
    w.u16(net.len());
    for layer in net.layers() {
        w.u8(tag(layer.kind()));
        w.u8(layer.trainable() as u8);
        match layer.kind() {
            LayerKind::Dense { inputs, outputs } => {
                w.u32(*inputs);
                w.u32(*outputs);
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                for v in [*in_channels, *out_channels, kernel.0, kernel.1, *stride] {
                    w.u32(v);
                }
                w.padding(*padding);
            }
            LayerKind::MaxPool2D { pool, stride, padding } => {
                for v in [pool.0, pool.1, *stride] {
                    w.u32(v);
                }
                w.padding(*padding);
            }
            LayerKind::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => {
                w.u32(*channels);
                w.f32(*momentum);
                w.f32(*epsilon);
            }
            LayerKind::Dropout { rate } => {
                w.f32(*rate);
            }
            LayerKind::ReLU | LayerKind::Softmax | LayerKind::Flatten => {}
            LayerKind::Reshape { target } => {
                w.dims(target);
            }
        }
        for t in layer.params().iter().chain(layer.buffers()) {
            w.tensor(t);
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelIoError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            }),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.u32()).collect()
    }
    fn padding(&mut self) -> Result<Padding> {
        match self.u8()? {
            0 => Ok(Padding::Valid),
            1 => Ok(Padding::Same),
            p => Err(ModelIoError::ShapeMismatch(format!("padding code {p}"))),
        }
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.dims()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ModelIoError::ShapeMismatch(format!("tensor dims {shape:?} overflow")))?;
        let bytes = self.take(len)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| ModelIoError::ShapeMismatch(e.to_string()))
    }
}

fn read_kind(r: &mut Reader, tag: u8) -> Result<LayerKind> {
    Ok(match tag {
        1 => LayerKind::Dense {
            inputs: r.u32()?,
            outputs: r.u32()?,
        },
        2 => LayerKind::Conv2D {
            in_channels: r.u32()?,
            out_channels: r.u32()?,
            kernel: (r.u32()?, r.u32()?),
            stride: r.u32()?,
            padding: r.padding()?,
        },
        3 => LayerKind::MaxPool2D {
            pool: (r.u32()?, r.u32()?),
            stride: r.u32()?,
            padding: r.padding()?,
        },
        4 => LayerKind::BatchNorm {
            channels: r.u32()?,
            momentum: r.f32()?,
            epsilon: r.f32()?,
        },
        5 => LayerKind::Dropout { rate: r.f32()? },
        6 => LayerKind::ReLU,
        7 => LayerKind::Softmax,
        8 => LayerKind::Flatten,
        9 => LayerKind::Reshape { target: r.dims()? },
        t => return Err(ModelIoError::UnknownTag(t)),
    })
}

/// Parses everything between the version field and the CRC.
fn read_body(r: &mut Reader) -> Result<Network> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| ModelIoError::ShapeMismatch("model name is not UTF-8".into()))?;
    let input_shape = r.dims()?;
    let count = r.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    let mut shape = input_shape.clone();
    for index in 0..count {
        let tag = r.u8()?;
        let flags = r.u8()?;
        let kind = read_kind(r, tag)?;
        let n_params = kind.param_shapes().len();
        let n_buffers = kind.buffer_shapes().len();
        let mut tensors = (0..n_params + n_buffers)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        let buffers = tensors.split_off(n_params);
        let layer = Layer::from_parts(kind, &shape, tensors, buffers, flags & 1 == 1)
            .map_err(|e| ModelIoError::ShapeMismatch(format!("layer {index}: {e}")))?;
        shape = layer.output_shape().to_vec();
        layers.push(layer);
    }
    Network::from_layers(name, &input_shape, layers).map_err(|e| ModelIoError::ShapeMismatch(e.to_string()))
}

/// Inverse of [`encode`].
///
/// Magic and version are checked first. On a CRC mismatch the structure is
/// walked once more to tell a short file ([`ModelIoError::Truncated`]) from
/// corrupted content ([`ModelIoError::Crc`]).
pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 {
        return Err(ModelIoError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(ModelIoError::BadMagic(magic));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(ModelIoError::UnsupportedVersion(version));
    }
    if bytes.len() < 10 {
        return Err(ModelIoError::Truncated {
            needed: 10,
            available: bytes.len(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        let mut walk = Reader { buf: bytes, pos: 6 };
        return match read_body(&mut walk) {
            Err(e @ ModelIoError::Truncated { .. }) => Err(e),
            _ if walk.pos + 4 > bytes.len() => Err(ModelIoError::Truncated {
                needed: walk.pos + 4,
                available: bytes.len(),
            }),
            _ => Err(ModelIoError::Crc { stored, computed }),
        };
    }
    let mut r = Reader { buf: body, pos: 6 };
    let net = read_body(&mut r)?;
    if r.pos != body.len() {
        return Err(ModelIoError::ShapeMismatch(format!(
            "{} unexpected bytes before the checksum",
            body.len() - r.pos
        )));
    }
    Ok(net)
}

/// Writes the model atomically (temporary file, then rename) and returns
/// the number of bytes written.
pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode(net)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "model path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, &bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(bytes.len() as u64)
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    decode(&fs::read(path)?)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the serialized form of a network.
pub fn checksum(net: &Network) -> Result<String> {
    Ok(sha256_hex(&encode(net)?))
}

pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Seconds to move `size_bytes` over a link of `rate_bits_per_second`.
pub fn transfer_time(size_bytes: f64, rate_bits_per_second: f64) -> Result<f64> {
    if !(rate_bits_per_second > 0.0) {
        return Err(ModelIoError::NonPositiveRate(rate_bits_per_second));
    }
    Ok(size_bytes * 8.0 / rate_bits_per_second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build, ArchName, ArchSpec};

    fn sample_net() -> Network {
        let mut net = build(&ArchSpec::new(ArchName::FsdOc), 4).unwrap();
        net.layer_mut(1).set_trainable(false);
        net
    }

    #[test]
    fn roundtrip_is_exact() {
        let net = sample_net();
        let bytes = encode(&net).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, net);
        assert!(!back.layers()[1].trainable());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn file_size_is_parameters_plus_small_header() {
        let net = build(&ArchSpec::new(ArchName::MnistOm).with_hidden_width(16), 0).unwrap();
        let bytes = encode(&net).unwrap();
        let payload = 25_888 * 4;
        assert!(bytes.len() > payload && bytes.len() < payload + 200, "{}", bytes.len());
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample_net()).unwrap();

        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"XNET");
        assert!(matches!(decode(&magic), Err(ModelIoError::BadMagic(m)) if &m == b"XNET"));

        let mut version = bytes.clone();
        version[4..6].copy_from_slice(&9999u16.to_le_bytes());
        assert!(matches!(decode(&version), Err(ModelIoError::UnsupportedVersion(9999))));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(ModelIoError::Crc { .. })));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(short), Err(ModelIoError::Truncated { .. })));
        assert!(matches!(decode(&bytes[..3]), Err(ModelIoError::Truncated { .. })));
    }

    #[test]
    fn unknown_tag_with_valid_crc() {
        let net = obfnet_engine::NetworkBuilder::new("r", &[3]).relu().build::<f32>(0).unwrap();
        let mut bytes = encode(&net).unwrap();
        bytes.truncate(bytes.len() - 4);
        let last = bytes.len() - 2; // tag of the only layer, before its flags
        assert_eq!(bytes[last], 6);
        bytes[last] = 42;
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(ModelIoError::UnknownTag(42))));
    }

    #[test]
    fn shape_mismatch_with_valid_crc() {
        let net = obfnet_engine::NetworkBuilder::new("d", &[2]).dense(1).build::<f32>(0).unwrap();
        let mut bytes = encode(&net).unwrap();
        bytes.truncate(bytes.len() - 4);
        // dense `outputs` field lives right after tag and flags
        let header = 4 + 2 + 2 + 1 + 1 + 4 + 2;
        bytes[header + 2 + 4..header + 2 + 8].copy_from_slice(&3u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(ModelIoError::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_networks_are_refused() {
        let mut net = sample_net();
        net.layer_mut(1).params_mut()[0].data_mut()[0] = f32::NAN;
        assert!(matches!(encode(&net), Err(ModelIoError::NonFinite)));
    }

    #[test]
    fn save_reports_actual_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.onet");
        let net = sample_net();
        let n = save(&net, &path).unwrap();
        assert_eq!(n, fs::metadata(&path).unwrap().len());
        assert_eq!(load(&path).unwrap(), net);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(file_checksum(&path).unwrap(), checksum(&net).unwrap());
    }

    #[test]
    fn transfer_times() {
        assert!((transfer_time(1.4 * MB, 10e6).unwrap() - 1.12).abs() < 1e-12);
        assert!((transfer_time(618.0 * KB, 10e6).unwrap() - 0.4944).abs() < 1e-12);
        assert_eq!(transfer_time(0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(transfer_time(1.0, 0.0), Err(ModelIoError::NonPositiveRate(_))));
        assert!(transfer_time(1.0, -5.0).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
