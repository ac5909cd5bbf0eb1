//! Simulated device queues and enqueued communication.
//!
//! A [`DeviceQueue`] runs tasks one at a time, in submission order, on its
//! own executor thread. Communication issued on a stream communicator whose
//! stream wraps a queue becomes a task on that queue: the host call only
//! appends it, and the operation executes when the queue reaches it.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, LazyLock, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rustc_hash::FxHashMap;

use crate::comm::{Comm, CommInner, CommKind};
use crate::datatype::{Datatype, Layout};
use crate::error::{Error, Result};
use crate::p2p::{SendSrc, Status};
use crate::request::{wait_inner, ReqInner, Request};
use crate::runtime::{Counted, LIVE_THREADS};
use crate::stream::StreamKind;

static REGISTRY: LazyLock<Mutex<FxHashMap<u64, Weak<Owner>>>> = LazyLock::new(|| Mutex::new(FxHashMap::default()));
static NEXT_HANDLE: AtomicU64 = AtomicU64::new(0x00de_71ce_0000_0001);

type Task = Box<dyn FnOnce() -> Result<()> + Send>;

/// One executed task, timed relative to the queue's creation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub label: String,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Default)]
struct QState {
    tasks: VecDeque<(String, Task)>,
    submitted: u64,
    completed: u64,
    closing: bool,
    errors: Vec<Error>,
}

struct QueueCore {
    handle: u64,
    state: Mutex<QState>,
    cv: Condvar,
    trace: Mutex<Vec<TaskRecord>>,
    epoch: Instant,
}

impl QueueCore {
    fn run(&self) {
        loop {
            let (label, task) = {
                let mut st = self.state.lock().unwrap();
                loop {
                    if let Some(t) = st.tasks.pop_front() {
                        break t;
                    }
                    if st.closing {
                        return;
                    }
                    st = self.cv.wait(st).unwrap();
                }
            };
            let start = self.epoch.elapsed();
            let r = task();
            let end = self.epoch.elapsed();
            self.trace.lock().unwrap().push(TaskRecord { label, start, end });
            let mut st = self.state.lock().unwrap();
            if let Err(e) = r {
                st.errors.push(e);
            }
            st.completed += 1;
            self.cv.notify_all();
        }
    }
}

struct Owner {
    core: Arc<QueueCore>,
    worker: Mutex<Option<JoinHandle<()>>>,
    destroyed: std::sync::atomic::AtomicBool,
}

impl Owner {
    fn shutdown(&self) {
        self.destroyed.store(true, Ordering::Release);
        self.core.state.lock().unwrap().closing = true;
        self.core.cv.notify_all();
        if let Some(h) = self.worker.lock().unwrap().take() {
            let _ = h.join();
        }
        REGISTRY.lock().unwrap().remove(&self.core.handle);
    }
}

impl Drop for Owner {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Simulated device queue: a serial task runner with an opaque handle.
#[derive(Clone)]
pub struct DeviceQueue {
    owner: Arc<Owner>,
}

impl std::fmt::Debug for DeviceQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DeviceQueue({:#x})", self.owner.core.handle)
    }
}

impl DeviceQueue {
    pub fn new() -> Result<DeviceQueue> {
        let handle = NEXT_HANDLE.fetch_add(1, Ordering::Relaxed);
        let core = Arc::new(QueueCore {
            handle,
            state: Mutex::new(QState::default()),
            cv: Condvar::new(),
            trace: Mutex::new(Vec::new()),
            epoch: Instant::now(),
        });
        let runner = core.clone();
        let token = Counted::new(&LIVE_THREADS);
        let worker = std::thread::Builder::new()
            .name(format!("minimpi-devq-{handle:x}"))
            .spawn(move || {
                let _token = token;
                runner.run();
            })
            .map_err(|e| Error::state(format!("cannot start device queue executor: {e}")))?;
        let owner = Arc::new(Owner {
            core,
            worker: Mutex::new(Some(worker)),
            destroyed: false.into(),
        });
        REGISTRY.lock().unwrap().insert(handle, Arc::downgrade(&owner));
        Ok(DeviceQueue { owner })
    }

    /// Opaque handle, as passed by value in stream info.
    pub fn handle(&self) -> u64 {
        self.owner.core.handle
    }

    /// The handle's bytes in memory order, ready for `Info::set_hex`.
    pub fn handle_bytes(&self) -> [u8; 8] {
        self.handle().to_ne_bytes()
    }

    fn push(&self, label: impl Into<String>, task: Task) -> Result<()> {
        if self.owner.destroyed.load(Ordering::Acquire) {
            return Err(Error::state("device queue has been destroyed"));
        }
        let core = &self.owner.core;
        let mut st = core.state.lock().unwrap();
        st.tasks.push_back((label.into(), task));
        st.submitted += 1;
        core.cv.notify_all();
        Ok(())
    }

    /// Copies `n` bytes between device buffers when the queue reaches it.
    pub fn enqueue_memcpy(
        &self,
        dst: &DeviceBuffer,
        dst_off: usize,
        src: &DeviceBuffer,
        src_off: usize,
        n: usize,
    ) -> Result<()> {
        if dst_off + n > dst.len() || src_off + n > src.len() {
            return Err(Error::arg("memcpy range outside buffer"));
        }
        let (d, s) = (dst.clone(), src.clone());
        self.push(
            "memcpy",
            Box::new(move || {
                if Arc::ptr_eq(&d.0, &s.0) {
                    d.0.lock().unwrap().copy_within(src_off..src_off + n, dst_off);
                } else {
                    let sv = s.0.lock().unwrap();
                    d.0.lock().unwrap()[dst_off..dst_off + n].copy_from_slice(&sv[src_off..src_off + n]);
                }
                Ok(())
            }),
        )
    }

    /// Runs `f` on the executor, after everything enqueued before it.
    pub fn enqueue_compute<F>(&self, label: &str, f: F) -> Result<()>
    where
        F: FnOnce() + Send + 'static,
    {
        self.push(
            label,
            Box::new(move || {
                f();
                Ok(())
            }),
        )
    }

    /// Blocks until every task submitted so far has run. Returns the first
    /// error raised by a blocking enqueued operation since the last call.
    pub fn synchronize(&self) -> Result<()> {
        let core = &self.owner.core;
        let mut st = core.state.lock().unwrap();
        let target = st.submitted;
        while st.completed < target {
            st = core.cv.wait(st).unwrap();
        }
        let first = st.errors.drain(..).next();
        first.map_or(Ok(()), Err)
    }

    /// Drains pending tasks, then stops the executor. Later enqueues fail
    /// with `State`.
    pub fn destroy(&self) -> Result<()> {
        if self.owner.destroyed.load(Ordering::Acquire) {
            return Err(Error::state("device queue has already been destroyed"));
        }
        self.owner.shutdown();
        let first = self.owner.core.state.lock().unwrap().errors.drain(..).next();
        first.map_or(Ok(()), Err)
    }

    /// Executed tasks with timestamps.
    pub fn trace(&self) -> Vec<TaskRecord> {
        self.owner.core.trace.lock().unwrap().clone()
    }
}

pub(crate) fn lookup(handle: u64) -> Result<DeviceQueue> {
    REGISTRY
        .lock()
        .unwrap()
        .get(&handle)
        .and_then(Weak::upgrade)
        .filter(|o| !o.destroyed.load(Ordering::Acquire))
        .map(|owner| DeviceQueue { owner })
        .ok_or_else(|| Error::arg(format!("no device queue with handle {handle:#x}")))
}

/// Memory visible to a device queue's tasks (host or "device" side).
#[derive(Clone, Default)]
pub struct DeviceBuffer(Arc<Mutex<Vec<u8>>>);

impl std::fmt::Debug for DeviceBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DeviceBuffer({} bytes)", self.len())
    }
}

impl DeviceBuffer {
    pub fn zeroed(len: usize) -> DeviceBuffer {
        DeviceBuffer::from_vec(vec![0; len])
    }

    pub fn from_vec(v: Vec<u8>) -> DeviceBuffer {
        DeviceBuffer(Arc::new(Mutex::new(v)))
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }

    /// Runs `f` with exclusive access to the contents.
    pub fn with<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        f(&mut self.0.lock().unwrap())
    }
}

enum Inflight {
    Pending {
        req: Arc<ReqInner>,
        vci: usize,
        into: Option<(DeviceBuffer, Datatype, u64)>,
    },
    Finished(Result<Status>),
}

/// State of a request started from a device queue.
pub(crate) struct EnqCore {
    queue: u64,
    state: Mutex<Option<Inflight>>,
    comm: Arc<CommInner>,
}

impl EnqCore {
    /// Waits for the transfer (on the executor) and records the outcome.
    fn complete(&self) -> Result<Status> {
        let cur = self.state.lock().unwrap().take();
        let out = match cur {
            None => Err(Error::state("enqueued operation was never started")),
            Some(Inflight::Finished(r)) => r,
            Some(Inflight::Pending { req, vci, into }) => {
                wait_inner(&self.comm.shared, &req, vci);
                let (st, buf) = req.finish();
                match (&st.error, into, buf) {
                    (Some(e), _, _) => Err(e.clone()),
                    (None, Some((dst, ty, count)), Some(data)) => dst
                        .with(|d| Layout::new(&ty, count).unpack_prefix(&data[..st.bytes], d))
                        .map(|_| st),
                    (None, _, _) => Ok(st),
                }
            }
        };
        *self.state.lock().unwrap() = Some(Inflight::Finished(out.clone()));
        out
    }

    fn result(&self) -> Option<Result<Status>> {
        match &*self.state.lock().unwrap() {
            Some(Inflight::Finished(r)) => Some(r.clone()),
            _ => None,
        }
    }
}

fn device_comm(comm: &Comm) -> Result<(Arc<CommInner>, DeviceQueue)> {
    let c = comm.live()?;
    let q = match (c.kind, c.streams.first()) {
        (CommKind::StreamSingle, Some(s)) if s.kind() == StreamKind::DeviceQueue => {
            s.device_queue().cloned().expect("device stream has a queue")
        }
        _ => {
            return Err(Error::arg(
                "enqueue operations need a stream communicator over a device-queue stream",
            ))
        }
    };
    Ok((comm.inner.clone(), q))
}

fn owned_payload(buf: &[u8], count: usize, ty: &Datatype) -> Result<Bytes> {
    if !ty.is_committed() {
        return Err(Error::arg("send datatype is not committed"));
    }
    let l = Layout::new(ty, count as u64);
    match l.contiguous_len() {
        Some(n) => buf
            .get(..n)
            .map(Bytes::copy_from_slice)
            .ok_or_else(|| Error::arg(format!("send buffer shorter than {n} bytes"))),
        None => {
            let mut out = vec![0u8; l.size() as usize];
            l.pack(buf, &mut out)?;
            Ok(out.into())
        }
    }
}

fn check_recv_type(dst: &DeviceBuffer, count: usize, ty: &Datatype) -> Result<usize> {
    if !ty.is_committed() {
        return Err(Error::arg("receive datatype is not committed"));
    }
    let l = Layout::new(ty, count as u64);
    if l.segments() > 0 && l.span_end() > dst.len() as i64 {
        return Err(Error::arg("receive buffer too small for the datatype"));
    }
    Ok(l.size() as usize)
}

/// Blocking-send alias used by [`Comm::send`] on device communicators.
pub(crate) fn send_enqueue_src(comm: &Comm, src: SendSrc<'_>, dest: usize, tag: i32) -> Result<()> {
    let data = match src {
        SendSrc::Borrowed(b) => Bytes::copy_from_slice(b),
        SendSrc::Owned(b) => b,
    };
    enqueue_send(comm, data, dest, tag)
}

fn enqueue_send(comm: &Comm, data: Bytes, dest: usize, tag: i32) -> Result<()> {
    let (c, q) = device_comm(comm)?;
    // Validates the destination now; the queued task routes again.
    c.send_route(dest as i32, tag, None, false)?;
    q.push(
        "send",
        Box::new(move || {
            let r = c.send_route(dest as i32, tag, None, false)?;
            c.send_blocking(SendSrc::Owned(data), r)
        }),
    )
}

impl Comm {
    /// Appends a send to the device queue. The payload is captured now, so
    /// `buf` may be reused as soon as this returns.
    pub fn send_enqueue(&self, buf: &[u8], count: usize, ty: &Datatype, dest: usize, tag: i32) -> Result<()> {
        enqueue_send(self, owned_payload(buf, count, ty)?, dest, tag)
    }

    /// Appends a receive into `dst` to the device queue.
    pub fn recv_enqueue(&self, dst: &DeviceBuffer, count: usize, ty: &Datatype, src: i32, tag: i32) -> Result<()> {
        let (c, q) = device_comm(self)?;
        let cap = check_recv_type(dst, count, ty)?;
        c.recv_route(src, tag, None, false)?;
        let (dst, ty) = (dst.clone(), ty.clone());
        q.push(
            "recv",
            Box::new(move || {
                let (v, pat) = c.recv_route(src, tag, None, false)?;
                let req = c.recv_owned(vec![0; cap], v, pat);
                wait_inner(&c.shared, &req, v);
                let (st, buf) = req.finish();
                if let Some(e) = st.error {
                    return Err(e);
                }
                let data = buf.expect("owned buffer");
                dst.with(|d| Layout::new(&ty, count as u64).unpack_prefix(&data[..st.bytes], d))?;
                Ok(())
            }),
        )
    }

    /// Appends the start of a send; returns an enqueued request that only
    /// [`Comm::wait_enqueue`] may complete.
    pub fn isend_enqueue(
        &self,
        buf: &[u8],
        count: usize,
        ty: &Datatype,
        dest: usize,
        tag: i32,
    ) -> Result<Request<'static>> {
        let (c, q) = device_comm(self)?;
        let data = owned_payload(buf, count, ty)?;
        c.send_route(dest as i32, tag, None, false)?;
        let core = Arc::new(EnqCore {
            queue: q.handle(),
            state: Mutex::new(None),
            comm: c.clone(),
        });
        let k = core.clone();
        q.push(
            "isend",
            Box::new(move || {
                let started = c
                    .send_route(dest as i32, tag, None, false)
                    .and_then(|r| c.start_send(SendSrc::Owned(data), r, false));
                *k.state.lock().unwrap() = Some(match started {
                    Ok(Some((req, vci))) => Inflight::Pending { req, vci, into: None },
                    Ok(None) => Inflight::Finished(Ok(Status::empty())),
                    Err(e) => Inflight::Finished(Err(e)),
                });
                Ok(())
            }),
        )?;
        Ok(Request::enqueued(core))
    }

    /// Appends the start of a receive into `dst`.
    pub fn irecv_enqueue(
        &self,
        dst: &DeviceBuffer,
        count: usize,
        ty: &Datatype,
        src: i32,
        tag: i32,
    ) -> Result<Request<'static>> {
        let (c, q) = device_comm(self)?;
        let cap = check_recv_type(dst, count, ty)?;
        c.recv_route(src, tag, None, false)?;
        let core = Arc::new(EnqCore {
            queue: q.handle(),
            state: Mutex::new(None),
            comm: c.clone(),
        });
        let (k, dst, ty) = (core.clone(), dst.clone(), ty.clone());
        q.push(
            "irecv",
            Box::new(move || {
                let posted = c
                    .recv_route(src, tag, None, false)
                    .map(|(v, pat)| (c.recv_owned(vec![0; cap], v, pat), v));
                *k.state.lock().unwrap() = Some(match posted {
                    Ok((req, vci)) => Inflight::Pending {
                        req,
                        vci,
                        into: Some((dst, ty, count as u64)),
                    },
                    Err(e) => Inflight::Finished(Err(e)),
                });
                Ok(())
            }),
        )?;
        Ok(Request::enqueued(core))
    }

    /// Appends a task that holds the queue until `req` completes. Errors of
    /// the operation are reported by [`Request::enqueued_result`] and by the
    /// queue's next `synchronize`.
    pub fn wait_enqueue(&self, req: &Request<'_>) -> Result<()> {
        self.waitall_enqueue(std::slice::from_ref(req))
    }

    pub fn waitall_enqueue(&self, reqs: &[Request<'_>]) -> Result<()> {
        let (_, q) = device_comm(self)?;
        let mut cores = Vec::with_capacity(reqs.len());
        for r in reqs {
            let core = r
                .enq_core()
                .ok_or_else(|| Error::arg("wait_enqueue needs requests from *_enqueue calls"))?;
            if core.queue != q.handle() {
                return Err(Error::arg("request belongs to a different device queue"));
            }
            cores.push(core.clone());
        }
        let label = if cores.len() == 1 { "wait" } else { "waitall" };
        q.push(
            label,
            Box::new(move || {
                let mut first = None;
                for c in &cores {
                    if let Err(e) = c.complete() {
                        first.get_or_insert(e);
                    }
                }
                first.map_or(Ok(()), Err)
            }),
        )
    }
}

impl Request<'_> {
    /// Outcome of an enqueued request once its wait task has run.
    pub fn enqueued_result(&self) -> Option<Result<Status>> {
        self.enq_core().and_then(|c| c.result())
    }
}
