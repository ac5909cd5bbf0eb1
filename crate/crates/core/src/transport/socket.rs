//! TCP backend: one duplex connection per process pair.
//!
//! Bootstrap: rank 0 listens on the root address. Every other rank opens its
//! own listener, connects to the root and says hello with its rank and
//! listener address; the root answers with the full address table. The rest
//! of the mesh is built right away: each rank dials every lower non-root rank
//! and accepts from every higher one.
//!
//! One reader thread per connection decodes frames and routes them to VCI
//! inboxes by `(context id, destination stream index)`. Frames for endpoints
//! not registered yet wait in a pending list until registration.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rustc_hash::FxHashMap;

use super::frame::{Frame, HEADER_LEN};
use super::vci::Incoming;
use super::VciArray;
use crate::error::{Error, Result};
use crate::runtime::{Config, Counted, LIVE_SOCKETS, LIVE_THREADS};

const HELLO: [u8; 4] = *b"MMHI";

pub(crate) struct Router {
    nimpl: usize,
    vcis: VciArray,
    map: RwLock<FxHashMap<(u32, i32), usize>>,
    pending: Mutex<Vec<Frame>>,
}

impl Router {
    fn lookup(&self, ctx: u32, idx: i32) -> Option<usize> {
        if idx < 0 {
            return Some((ctx & !crate::comm::COLL_CTX_BIT) as usize % self.nimpl);
        }
        self.map.read().unwrap().get(&(ctx, idx)).copied()
    }

    fn route(&self, f: Frame) {
        if let Some(v) = self.lookup(f.env.ctx, f.env.dst_idx) {
            self.vcis[v].inbox.push(Incoming::Frame(f));
            return;
        }
        let mut pending = self.pending.lock().unwrap();
        // Re-check under the pending lock so registration cannot slip between.
        match self.lookup(f.env.ctx, f.env.dst_idx) {
            Some(v) => self.vcis[v].inbox.push(Incoming::Frame(f)),
            None => pending.push(f),
        }
    }

    /// Maps an endpoint to a VCI, flushing frames that arrived early.
    pub(crate) fn register(&self, ctx: u32, idx: i32, vci: usize) {
        let mut pending = self.pending.lock().unwrap();
        let mut keep = Vec::with_capacity(pending.len());
        for f in pending.drain(..) {
            if f.env.ctx == ctx && f.env.dst_idx == idx {
                self.vcis[vci].inbox.push(Incoming::Frame(f));
            } else {
                keep.push(f);
            }
        }
        *pending = keep;
        self.map.write().unwrap().insert((ctx, idx), vci);
    }

    pub(crate) fn unregister(&self, ctx: u32, idx: i32) {
        self.map.write().unwrap().remove(&(ctx, idx));
    }
}

struct Conn {
    writer: Mutex<Option<(TcpStream, Counted)>>,
}

pub(crate) struct SocketNet {
    conns: Vec<Option<Conn>>,
    pub router: Arc<Router>,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

impl SocketNet {
    pub(crate) fn send(&self, world: usize, header: &Frame, parts: &[&[u8]]) -> Result<()> {
        let conn = self.conns[world]
            .as_ref()
            .ok_or_else(|| Error::transport(format!("no connection to rank {world}")))?;
        let len: usize = parts.iter().map(|p| p.len()).sum();
        let mut buf = Vec::with_capacity(HEADER_LEN + len);
        buf.extend_from_slice(&header.encode_header_with_len(len));
        for p in parts {
            buf.extend_from_slice(p);
        }
        let mut w = conn.writer.lock().unwrap();
        match w.as_mut() {
            Some((s, _)) => s.write_all(&buf).map_err(Error::from),
            None => Err(Error::transport(format!("connection to rank {world} is closed"))),
        }
    }

    /// Closes every connection and joins the reader threads. Peers must be
    /// shutting down too, since readers exit on end-of-stream.
    pub(crate) fn shutdown(&self) {
        for c in self.conns.iter().flatten() {
            if let Some((s, _)) = c.writer.lock().unwrap().as_ref() {
                let _ = s.shutdown(Shutdown::Write);
            }
        }
        for h in self.readers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
        for c in self.conns.iter().flatten() {
            c.writer.lock().unwrap().take();
        }
    }

    /// Tears connections down without waiting for peers. Readers see the
    /// closed socket and exit on their own.
    pub(crate) fn abort(&self) {
        for c in self.conns.iter().flatten() {
            if let Some((s, _)) = c.writer.lock().unwrap().take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        self.readers.lock().unwrap().clear();
    }
}

fn timeout_err(what: &str, cfg: &Config) -> Error {
    Error::transport(format!("{what} within {} ms", cfg.connect_timeout_ms))
}

fn connect_retry(addr: &str, cfg: &Config) -> Result<TcpStream> {
    let deadline = Instant::now() + Duration::from_millis(cfg.connect_timeout_ms);
    let targets: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| Error::transport(format!("bad address {addr:?}: {e}")))?
        .collect();
    loop {
        for t in &targets {
            let left = deadline.saturating_duration_since(Instant::now());
            if let Ok(s) = TcpStream::connect_timeout(t, left.max(Duration::from_millis(1))) {
                s.set_nodelay(true)?;
                return Ok(s);
            }
        }
        if Instant::now() >= deadline {
            return Err(timeout_err(&format!("cannot reach {addr}"), cfg));
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn accept_deadline(l: &TcpListener, deadline: Instant, cfg: &Config) -> Result<TcpStream> {
    l.set_nonblocking(true)?;
    loop {
        match l.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(timeout_err("peers did not connect", cfg));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn read_u32(s: &mut TcpStream) -> Result<u32> {
    let mut b = [0u8; 4];
    s.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(s: &mut TcpStream) -> Result<String> {
    let n = read_u32(s)? as usize;
    let mut b = vec![0u8; n];
    s.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::transport("bad address string"))
}

fn put_str(out: &mut Vec<u8>, v: &str) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    out.extend_from_slice(v.as_bytes());
}

/// Joins the job and returns a connected mesh. `root_listener` lets an
/// in-process launcher pre-bind rank 0's port.
pub(crate) fn establish(
    cfg: &Config,
    vcis: VciArray,
    nimpl: usize,
    root_listener: Option<TcpListener>,
) -> Result<SocketNet> {
    let (rank, size) = (cfg.rank, cfg.size);
    let deadline = Instant::now() + Duration::from_millis(cfg.connect_timeout_ms);
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
    if size > 1 {
        if rank == 0 {
            let listener = match root_listener {
                Some(l) => l,
                None => {
                    let a = cfg
                        .root_addr
                        .as_deref()
                        .ok_or_else(|| Error::arg("socket transport needs MINIMPI_ROOT_ADDR"))?;
                    TcpListener::bind(a)?
                }
            };
            let mut table = vec![String::new(); size];
            for _ in 1..size {
                let mut s = accept_deadline(&listener, deadline, cfg)?;
                let mut magic = [0u8; 4];
                s.read_exact(&mut magic)?;
                if magic != HELLO {
                    return Err(Error::transport("bad hello from peer"));
                }
                let r = read_u32(&mut s)? as usize;
                if r == 0 || r >= size || streams[r].is_some() {
                    return Err(Error::transport(format!("unexpected hello from rank {r}")));
                }
                table[r] = read_str(&mut s)?;
                streams[r] = Some(s);
            }
            let mut msg = Vec::new();
            for a in &table {
                put_str(&mut msg, a);
            }
            for s in streams.iter_mut().flatten() {
                s.write_all(&msg)?;
            }
        } else {
            let root = cfg
                .root_addr
                .as_deref()
                .ok_or_else(|| Error::arg("socket transport needs MINIMPI_ROOT_ADDR"))?;
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let mine = listener.local_addr()?.to_string();
            let mut s = connect_retry(root, cfg)?;
            let mut hello = HELLO.to_vec();
            hello.extend_from_slice(&(rank as u32).to_le_bytes());
            put_str(&mut hello, &mine);
            s.write_all(&hello)?;
            let mut table = Vec::with_capacity(size);
            for _ in 0..size {
                table.push(read_str(&mut s)?);
            }
            streams[0] = Some(s);
            for (peer, addr) in table.iter().enumerate().take(rank).skip(1) {
                let mut c = connect_retry(addr, cfg)?;
                c.write_all(&(rank as u32).to_le_bytes())?;
                streams[peer] = Some(c);
            }
            for _ in rank + 1..size {
                let mut c = accept_deadline(&listener, deadline, cfg)?;
                let r = read_u32(&mut c)? as usize;
                if r <= rank || r >= size || streams[r].is_some() {
                    return Err(Error::transport(format!("unexpected connection from rank {r}")));
                }
                streams[r] = Some(c);
            }
        }
    }

    let router = Arc::new(Router {
        nimpl,
        vcis,
        map: RwLock::new(FxHashMap::default()),
        pending: Mutex::new(Vec::new()),
    });
    let mut conns = Vec::with_capacity(size);
    let mut readers = Vec::new();
    for s in streams {
        match s {
            None => conns.push(None),
            Some(s) => {
                let mut rd = s.try_clone()?;
                let r = router.clone();
                let token = Counted::new(&LIVE_THREADS);
                readers.push(
                    std::thread::Builder::new()
                        .name("minimpi-reader".into())
                        .spawn(move || {
                            let _token = token;
                            while let Ok(f) = read_frame(&mut rd) {
                                r.route(f);
                            }
                        })
                        .map_err(|e| Error::transport(format!("cannot start reader: {e}")))?,
                );
                conns.push(Some(Conn {
                    writer: Mutex::new(Some((s, Counted::new(&LIVE_SOCKETS)))),
                }));
            }
        }
    }
    Ok(SocketNet {
        conns,
        router,
        readers: Mutex::new(readers),
    })
}

fn read_frame(s: &mut TcpStream) -> Result<Frame> {
    let mut h = [0u8; HEADER_LEN];
    s.read_exact(&mut h)?;
    let (mut f, len) = Frame::decode_header(&h)?;
    let mut payload = vec![0u8; len as usize];
    s.read_exact(&mut payload)?;
    f.payload = payload.into();
    Ok(f)
}
