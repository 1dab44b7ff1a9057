use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use obfnet_engine::{LayerKind, Network, Tensor};

use super::wire::{read_frame, write_frame, ErrorCode, ErrorFrame, Incoming, InferenceRequest, InferenceResponse, Reply};
use super::ProtocolError;

#[derive(Clone, Copy, Debug)]
pub struct ServerConfig {
    pub max_frame: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_frame: super::DEFAULT_MAX_FRAME,
        }
    }
}

type Connections = Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>>;

/// A running server. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    connections: Connections,
}

/// Binds `addr` and answers requests with `model` on a thread per
/// connection. The model must end in a softmax.
pub fn serve(model: Network, addr: impl ToSocketAddrs, cfg: ServerConfig) -> io::Result<ServerHandle> {
    if !matches!(model.layers().last().map(|l| l.kind()), Some(LayerKind::Softmax)) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "served model must end in a softmax layer",
        ));
    }
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let connections: Connections = Arc::default();
    log::info!("serving {} on {addr}", model.name());
    let model = Arc::new(model);
    let accept = {
        let stop = Arc::clone(&stop);
        let connections = Arc::clone(&connections);
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match stream {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let Ok(handle) = stream.try_clone() else { continue };
                let model = Arc::clone(&model);
                let worker = thread::spawn(move || {
                    let peer = stream.peer_addr().ok();
                    log::debug!("connection from {peer:?}");
                    if let Err(e) = handle_connection(&model, stream, cfg) {
                        log::debug!("connection {peer:?} ended: {e}");
                    }
                });
                let mut conns = connections.lock().unwrap();
                conns.retain(|(_, h)| !h.is_finished());
                conns.push((handle, worker));
            }
        })
    };
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
        connections,
    })
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, closes open connections and joins every thread.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        let Some(accept) = self.accept.take() else { return };
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let _ = accept.join();
        let conns = std::mem::take(&mut *self.connections.lock().unwrap());
        for (stream, worker) in conns {
            let _ = stream.shutdown(Shutdown::Both);
            let _ = worker.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn handle_connection(model: &Network, stream: TcpStream, cfg: ServerConfig) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        match read_frame(&mut reader, cfg.max_frame)? {
            Incoming::Closed => return Ok(()),
            Incoming::TooLarge(len) => {
                let e = ErrorFrame::new(
                    0,
                    ErrorCode::FrameTooLarge,
                    format!("frame of {len} bytes exceeds the {} byte limit", cfg.max_frame),
                );
                write_frame(&mut writer, &e.encode())?;
                writer.get_ref().shutdown(Shutdown::Both)?;
                return Ok(());
            }
            Incoming::Frame(body) => {
                let reply = answer(model, &body);
                write_frame(&mut writer, &reply.encode())?;
            }
        }
    }
}

/// Reply to one request body. Exposed to the crate for direct testing.
pub(crate) fn answer(model: &Network, body: &[u8]) -> Reply {
    let req = match InferenceRequest::decode(body) {
        Ok(r) => r,
        Err(ProtocolError::UnsupportedVersion { id, version }) => {
            return Reply::Error(ErrorFrame::new(
                id,
                ErrorCode::UnsupportedVersion,
                format!("version {version} not supported"),
            ))
        }
        Err(ProtocolError::Malformed { id, reason }) => {
            return Reply::Error(ErrorFrame::new(id, ErrorCode::Malformed, reason))
        }
        Err(e) => return Reply::Error(ErrorFrame::new(super::peek_id(body), ErrorCode::Malformed, e.to_string())),
    };
    if req.shape != model.input_shape() {
        return Reply::Error(ErrorFrame::new(
            req.id,
            ErrorCode::ShapeMismatch,
            format!("sample shape {:?}, model expects {:?}", req.shape, model.input_shape()),
        ));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&req.shape);
    let probs = Tensor::new(shape, req.payload).and_then(|x| model.predict(&x));
    match probs {
        Ok(p) => Reply::Response(InferenceResponse {
            id: req.id,
            label: p.argmax_rows()[0] as u16,
            probabilities: p.into_data(),
        }),
        Err(e) => Reply::Error(ErrorFrame::new(req.id, ErrorCode::Internal, e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use obfnet_engine::NetworkBuilder;

    fn model() -> Network {
        NetworkBuilder::new("tiny", &[3]).dense(2).softmax().build(1).unwrap()
    }

    fn body(frame: Vec<u8>) -> Vec<u8> {
        frame[4..].to_vec()
    }

    #[test]
    fn answers_match_local_inference() {
        let net = model();
        let x = vec![0.5, -1.0, 2.0];
        let req = InferenceRequest {
            id: 42,
            shape: vec![3],
            payload: x.clone(),
        };
        let Reply::Response(r) = answer(&net, &body(req.encode())) else { panic!() };
        let local = net.predict(&Tensor::new(vec![1, 3], x).unwrap()).unwrap();
        assert_eq!(r.id, 42);
        assert_eq!(r.probabilities, local.data());
        assert_eq!(r.label as usize, local.argmax_rows()[0]);
    }

    #[test]
    fn shape_mismatch_and_malformed() {
        let net = model();
        let req = InferenceRequest {
            id: 1,
            shape: vec![4],
            payload: vec![0.0; 4],
        };
        let Reply::Error(e) = answer(&net, &body(req.encode())) else { panic!() };
        assert_eq!((e.id, e.code), (1, ErrorCode::ShapeMismatch as u16));
        let Reply::Error(e) = answer(&net, b"junk") else { panic!() };
        assert_eq!(e.code, ErrorCode::Malformed as u16);
    }

    #[test]
    fn rejects_models_without_softmax() {
        let net = NetworkBuilder::new("o", &[3]).dense(3).build::<f32>(1).unwrap();
        assert!(serve(net, "127.0.0.1:0", ServerConfig::default()).is_err());
    }
}
