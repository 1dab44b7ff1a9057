use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::time::Duration;

use obfnet_engine::{Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wire::{read_frame, write_frame, Incoming, InferenceRequest, InferenceResponse, Reply, DEFAULT_MAX_FRAME};
use super::ProtocolError;
use crate::data::Dataset;
use crate::obfset;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    /// Obfuscate every sample with a randomly chosen member of the set.
    OptIn,
    /// Send samples unchanged.
    OptOut,
}

#[derive(Clone, Debug)]
pub struct EdgeConfig {
    pub server: String,
    /// Directory holding an obfuscation-network set manifest.
    pub set_dir: Option<PathBuf>,
    pub mode: EdgeMode,
    pub seed: u64,
    pub timeout: Duration,
}

impl EdgeConfig {
    pub fn new(server: impl Into<String>, mode: EdgeMode) -> Self {
        EdgeConfig {
            server: server.into(),
            set_dir: None,
            mode,
            seed: 0,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeResult {
    pub label: usize,
    pub probabilities: Vec<f32>,
    /// Index of the obfuscation network used, if any.
    pub obfnet: Option<usize>,
}

/// Uniform draw of a set member.
pub fn select_obfnet(set_len: usize, rng: &mut impl Rng) -> Result<usize, ProtocolError> {
    if set_len == 0 {
        return Err(ProtocolError::EmptySet);
    }
    Ok(rng.gen_range(0..set_len))
}

pub struct EdgeClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    mode: EdgeMode,
    obfnets: Vec<Network>,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl EdgeClient {
    /// Connects and, in opt-in mode, loads the usable members of the set at
    /// `cfg.set_dir`.
    pub fn connect(cfg: &EdgeConfig) -> Result<Self, ProtocolError> {
        let obfnets = match (cfg.mode, &cfg.set_dir) {
            (EdgeMode::OptIn, Some(dir)) => {
                let set = obfset::load_set(dir).map_err(|e| ProtocolError::Io(std::io::Error::other(e.to_string())))?;
                set.usable().into_iter().cloned().collect()
            }
            _ => Vec::new(),
        };
        Self::with_obfnets(cfg, obfnets)
    }

    pub fn with_obfnets(cfg: &EdgeConfig, obfnets: Vec<Network>) -> Result<Self, ProtocolError> {
        if cfg.mode == EdgeMode::OptIn && obfnets.is_empty() {
            return Err(ProtocolError::EmptySet);
        }
        let mut last = None;
        let mut stream = None;
        for addr in cfg.server.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, cfg.timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = match (stream, last) {
            (Some(s), _) => s,
            (None, Some(e)) => return Err(ProtocolError::from_io(e)),
            (None, None) => {
                return Err(ProtocolError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} resolves to no address", cfg.server),
                )))
            }
        };
        stream.set_read_timeout(Some(cfg.timeout))?;
        stream.set_write_timeout(Some(cfg.timeout))?;
        stream.set_nodelay(true)?;
        Ok(EdgeClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            mode: cfg.mode,
            obfnets,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            next_id: 1,
        })
    }

    pub fn mode(&self) -> EdgeMode {
        self.mode
    }

    /// Builds the request for one sample without sending it. In opt-in mode
    /// this draws a member and runs it locally.
    pub fn prepare_request(
        &mut self,
        shape: &[usize],
        sample: &[f32],
    ) -> Result<(InferenceRequest, Option<usize>), ProtocolError> {
        let id = self.next_id;
        self.next_id += 1;
        let (payload, used) = match self.mode {
            EdgeMode::OptOut => (sample.to_vec(), None),
            EdgeMode::OptIn => {
                let k = select_obfnet(self.obfnets.len(), &mut self.rng)?;
                let net = &self.obfnets[k];
                if net.input_shape() != shape {
                    return Err(ProtocolError::Shape {
                        expected: net.input_shape().to_vec(),
                        got: shape.to_vec(),
                    });
                }
                let mut batch = vec![1];
                batch.extend_from_slice(shape);
                let out = net.predict(&Tensor::new(batch, sample.to_vec())?)?;
                (out.into_data(), Some(k))
            }
        };
        Ok((
            InferenceRequest {
                id,
                shape: shape.to_vec(),
                payload,
            },
            used,
        ))
    }

    /// Sends a request and waits for its reply.
    pub fn send(&mut self, req: &InferenceRequest) -> Result<InferenceResponse, ProtocolError> {
        write_frame(&mut self.writer, &req.encode()).map_err(ProtocolError::from_io)?;
        let body = match read_frame(&mut self.reader, DEFAULT_MAX_FRAME).map_err(ProtocolError::from_io)? {
            Incoming::Frame(b) => b,
            Incoming::Closed => return Err(ProtocolError::Closed),
            Incoming::TooLarge(len) => {
                return Err(ProtocolError::Malformed {
                    id: req.id,
                    reason: format!("reply of {len} bytes"),
                })
            }
        };
        match Reply::decode(&body)? {
            Reply::Error(e) => Err(ProtocolError::Server {
                id: e.id,
                code: e.code,
                message: e.message,
            }),
            Reply::Response(r) if r.id != req.id => Err(ProtocolError::IdMismatch {
                expected: req.id,
                got: r.id,
            }),
            Reply::Response(r) => Ok(r),
        }
    }

    pub fn infer(&mut self, shape: &[usize], sample: &[f32]) -> Result<EdgeResult, ProtocolError> {
        let (req, obfnet) = self.prepare_request(shape, sample)?;
        let r = self.send(&req)?;
        Ok(EdgeResult {
            label: r.label as usize,
            probabilities: r.probabilities,
            obfnet,
        })
    }

    /// Remote labels for every sample of `ds`, in order.
    pub fn infer_dataset(&mut self, ds: &Dataset) -> Result<Vec<usize>, ProtocolError> {
        let shape = ds.sample_shape().to_vec();
        (0..ds.len())
            .map(|i| self.infer(&shape, ds.samples.sample(i)).map(|r| r.label))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_is_uniform_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(select_obfnet(0, &mut rng), Err(ProtocolError::EmptySet)));
        assert!((0..100).all(|_| select_obfnet(1, &mut rng).unwrap() == 0));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000).map(|_| select_obfnet(5, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(9);
        assert_eq!(a, draw(9));
        let mut freq = [0usize; 5];
        for k in a {
            freq[k] += 1;
        }
        // Binomial(10000, 0.2) has sd 40; the band is 30 sd wide.
        assert!(freq.iter().all(|&f| (1700..=2300).contains(&f)), "{freq:?}");
    }

    #[test]
    fn opt_in_without_members_is_rejected() {
        let cfg = EdgeConfig::new("127.0.0.1:1", EdgeMode::OptIn);
        assert!(matches!(EdgeClient::with_obfnets(&cfg, Vec::new()), Err(ProtocolError::EmptySet)));
    }
}
