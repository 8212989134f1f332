use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::protocol::{codes, read_frame, read_message, transport, write_message, Message, WireMask, PROTOCOL_VERSION};
use super::{MaskRequest, ModelBackend, Prediction, TaskTarget};
use crate::error::{Error, Result};
use crate::store::{BinaryMask, Dims, SiteId};

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Connection {
    fn dial(addr: &SocketAddr, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect_timeout(addr, timeout).map_err(transport)?;
        stream.set_read_timeout(Some(timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(timeout)).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone().map_err(transport)?),
            writer: BufWriter::new(stream),
        })
    }

    fn call(&mut self, message: &Message) -> Result<Message> {
        write_message(&mut self.writer, message)?;
        read_message(&mut self.reader)?.ok_or_else(|| Error::Transport("server closed the connection".into()))
    }
}

struct Handshake {
    model_id: String,
    sites: Vec<SiteId>,
    grid: Dims,
    channels: usize,
}

fn handshake(conn: &mut Connection, model_id: &str) -> Result<Handshake> {
    let reply = conn.call(&Message::Hello {
        version: PROTOCOL_VERSION,
        model_id: model_id.to_string(),
    })?;
    match reply {
        Message::HelloAck {
            version,
            model_id,
            sites,
            grid,
            channels,
        } => {
            if version != PROTOCOL_VERSION {
                return Err(Error::Protocol(format!(
                    "protocol version mismatch: server speaks {version}, client {PROTOCOL_VERSION}"
                )));
            }
            Ok(Handshake {
                model_id,
                sites,
                grid: Dims::new(grid[0], grid[1], grid[2]),
                channels,
            })
        }
        Message::Error { code, message, .. } => Err(Error::Remote { code, message }),
        other => Err(Error::Protocol(format!("expected hello_ack, got {other:?}"))),
    }
}

struct Pool {
    idle: Vec<Connection>,
    open: usize,
}

/// Client for a model served over the framed protocol. Each connection
/// carries one request at a time; up to `pool_size` connections are opened
/// lazily so concurrent callers run in parallel. A connection that sees any
/// transport or protocol failure is discarded and redialled on next use.
pub struct RemoteBackend {
    addr: SocketAddr,
    timeout: Duration,
    pool_size: usize,
    info: Handshake,
    pool: Mutex<Pool>,
    available: Condvar,
    next_id: AtomicU64,
}

impl RemoteBackend {
    /// Connects and handshakes. An empty `model_id` accepts whatever the
    /// server hosts.
    pub fn connect(endpoint: &str, model_id: &str, pool_size: usize, timeout: Duration) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::InvalidParam("pool size must be at least 1".into()));
        }
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("resolving {endpoint}: {e}")))?
            .next()
            .ok_or_else(|| Error::Transport(format!("{endpoint} resolves to no address")))?;
        let mut conn = Connection::dial(&addr, timeout)?;
        let info = handshake(&mut conn, model_id)?;
        Ok(RemoteBackend {
            addr,
            timeout,
            pool_size,
            info,
            pool: Mutex::new(Pool {
                idle: vec![conn],
                open: 1,
            }),
            available: Condvar::new(),
            next_id: AtomicU64::new(1),
        })
    }

    fn checkout(&self) -> Result<Connection> {
        let mut pool = self.pool.lock().expect("pool lock");
        loop {
            if let Some(conn) = pool.idle.pop() {
                return Ok(conn);
            }
            if pool.open < self.pool_size {
                pool.open += 1;
                drop(pool);
                let dialled = Connection::dial(&self.addr, self.timeout).and_then(|mut c| {
                    let info = handshake(&mut c, &self.info.model_id)?;
                    if info.sites != self.info.sites || info.grid != self.info.grid {
                        return Err(Error::Protocol("server changed its site list between connections".into()));
                    }
                    Ok(c)
                });
                if dialled.is_err() {
                    self.checkin(None);
                }
                return dialled;
            }
            pool = self.available.wait(pool).expect("pool lock");
        }
    }

    fn checkin(&self, conn: Option<Connection>) {
        let mut pool = self.pool.lock().expect("pool lock");
        match conn {
            Some(c) => pool.idle.push(c),
            None => pool.open -= 1,
        }
        self.available.notify_one();
    }
}

impl ModelBackend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.info.model_id
    }

    fn sites(&self) -> Vec<SiteId> {
        self.info.sites.clone()
    }

    fn grid(&self) -> Dims {
        self.info.grid
    }

    fn channels(&self) -> usize {
        self.info.channels
    }

    fn forward(&self, request: &MaskRequest) -> Result<Prediction> {
        request.validate(&self.info.sites, self.info.grid)?;
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let masks = request
            .masks
            .iter()
            .map(|(site, mask)| WireMask {
                site: site.clone(),
                rle: BinaryMask::encode(&request.video_id, mask).runs().to_vec(),
            })
            .collect();
        let message = Message::Forward {
            request_id,
            video_id: request.video_id.clone(),
            masks,
            target: request.target.clone(),
        };
        let mut conn = self.checkout()?;
        let reply = conn.call(&message);
        let outcome = match reply {
            Ok(Message::Result { request_id: id, metric }) if id == request_id => Ok(Prediction::Scored(metric)),
            Ok(Message::Error {
                request_id: Some(id),
                code,
                message,
            }) if id == request_id => Err(Error::Remote { code, message }),
            Ok(other) => Err(Error::Protocol(format!("unexpected reply to request {request_id}: {other:?}"))),
            Err(e) => Err(e),
        };
        // A connection is reusable after a clean result or a relayed server error.
        let reusable = matches!(outcome, Ok(_) | Err(Error::Remote { .. }));
        self.checkin(reusable.then_some(conn));
        outcome
    }

    fn metric(&self, prediction: &Prediction, _target: &TaskTarget) -> Result<f64> {
        match prediction {
            Prediction::Scored(m) => Ok(*m),
            _ => Err(Error::Backend("remote backends return scored predictions".into())),
        }
    }
}

/// Answers protocol requests on one stream until the peer hangs up.
/// Malformed frames and failing requests produce error frames; the stream
/// stays open.
pub fn serve(stream: TcpStream, backend: &dyn ModelBackend) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone().map_err(transport)?);
    let mut writer = BufWriter::new(stream);
    let grid = backend.grid();
    let sites = backend.sites();
    while let Some(body) = read_frame(&mut reader)? {
        let reply = match serde_json::from_slice::<Message>(&body) {
            Err(e) => Message::Error {
                request_id: None,
                code: codes::MALFORMED,
                message: format!("malformed frame: {e}"),
            },
            Ok(Message::Hello { version, model_id }) => {
                if version != PROTOCOL_VERSION {
                    Message::Error {
                        request_id: None,
                        code: codes::VERSION,
                        message: format!("unsupported protocol version {version}"),
                    }
                } else if !model_id.is_empty() && model_id != backend.model_id() {
                    Message::Error {
                        request_id: None,
                        code: codes::NOT_FOUND,
                        message: format!("model {model_id} is not served here"),
                    }
                } else {
                    Message::HelloAck {
                        version: PROTOCOL_VERSION,
                        model_id: backend.model_id().to_string(),
                        sites: sites.clone(),
                        grid: grid.as_array(),
                        channels: backend.channels(),
                    }
                }
            }
            Ok(Message::Forward {
                request_id,
                video_id,
                masks,
                target,
            }) => {
                let outcome = decode_request(&video_id, masks, target, grid).and_then(|r| backend.evaluate(&r));
                match outcome {
                    Ok(metric) => Message::Result { request_id, metric },
                    Err(e) => Message::Error {
                        request_id: Some(request_id),
                        code: error_code(&e),
                        message: e.to_string(),
                    },
                }
            }
            Ok(other) => Message::Error {
                request_id: None,
                code: codes::MALFORMED,
                message: format!("unexpected client message {other:?}"),
            },
        };
        write_message(&mut writer, &reply)?;
    }
    Ok(())
}

fn decode_request(video_id: &str, masks: Vec<WireMask>, target: TaskTarget, grid: Dims) -> Result<MaskRequest> {
    let mut request = MaskRequest::unmasked(video_id, target);
    for m in masks {
        if request.masks.contains_key(&m.site) {
            return Err(Error::InvalidParam(format!("two masks for site {}", m.site)));
        }
        let dense = BinaryMask::from_runs(video_id, grid, m.rle)?.decode()?;
        request.masks.insert(m.site, dense);
    }
    Ok(request)
}

fn error_code(e: &Error) -> i64 {
    match e {
        Error::UnknownSite(_) | Error::UnknownVideo(_) => codes::NOT_FOUND,
        Error::Rle(_) | Error::Shape(_) | Error::InvalidParam(_) => codes::MALFORMED,
        _ => codes::INTERNAL,
    }
}

/// A background server on a loopback port, one thread per connection.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Stops accepting and severs every open connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for s in self.streams.lock().expect("stream list").drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn spawn_server(backend: Arc<dyn ModelBackend>) -> Result<ServerHandle> {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(transport)?;
    let addr = listener.local_addr().map_err(transport)?;
    let stop = Arc::new(AtomicBool::new(false));
    let streams = Arc::new(Mutex::new(Vec::new()));
    let accept = {
        let stop = Arc::clone(&stop);
        let streams = Arc::clone(&streams);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                if let Ok(clone) = stream.try_clone() {
                    streams.lock().expect("stream list").push(clone);
                }
                let backend = Arc::clone(&backend);
                std::thread::spawn(move || {
                    let _ = serve(stream, backend.as_ref());
                });
            }
        })
    };
    Ok(ServerHandle {
        addr,
        stop,
        streams,
        accept: Some(accept),
    })
}
