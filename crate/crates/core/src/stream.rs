//! Stream objects and the explicit VCI pool.
//!
//! A serial-context stream owns one explicit VCI outright and enters it
//! without locking; the caller promises never to use the stream from two
//! threads at once. Device-queue streams share their queue's VCI.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::offload::{self, DeviceQueue};
use crate::runtime::{Info, Instance, Shared};

/// Stream ids are never reused within a process.
static NEXT_STREAM_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct VciPool {
    base: usize,
    used: Mutex<Vec<bool>>,
}

impl VciPool {
    pub(crate) fn new(base: usize, capacity: usize) -> VciPool {
        VciPool {
            base,
            used: Mutex::new(vec![false; capacity]),
        }
    }

    pub(crate) fn alloc(&self) -> Result<usize> {
        let mut used = self.used.lock().unwrap();
        match used.iter().position(|u| !u) {
            Some(i) => {
                used[i] = true;
                Ok(self.base + i)
            }
            None => Err(Error::Exhausted(format!("all {} explicit VCIs are in use", used.len()))),
        }
    }

    /// Allocates `n` VCIs or none.
    pub(crate) fn alloc_many(&self, n: usize) -> Result<Vec<usize>> {
        let mut got = Vec::with_capacity(n);
        for _ in 0..n {
            match self.alloc() {
                Ok(v) => got.push(v),
                Err(e) => {
                    got.into_iter().for_each(|v| self.release(v));
                    return Err(e);
                }
            }
        }
        Ok(got)
    }

    pub(crate) fn release(&self, v: usize) {
        let mut used = self.used.lock().unwrap();
        debug_assert!(used[v - self.base], "double release of VCI {v}");
        used[v - self.base] = false;
    }

    pub(crate) fn usage(&self) -> (usize, usize) {
        let used = self.used.lock().unwrap();
        (used.iter().filter(|u| **u).count(), used.len())
    }
}

/// Empties a VCI's queues and protocol state before it is reused.
pub(crate) fn reset_vci(s: &Shared, v: usize) {
    let mut g = s.enter(v);
    while g.vci.inbox.pop().is_some() {}
    g.state().reset();
    g.vci.greq_count.store(0, Ordering::Release);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    SerialContext,
    DeviceQueue,
    Null,
}

pub(crate) struct StreamInner {
    pub id: u64,
    pub kind: StreamKind,
    pub vci: usize,
    pub shared: Arc<Shared>,
    pub device: Option<DeviceQueue>,
    /// Communicators currently using the stream.
    pub attached: AtomicUsize,
    pub progress_threads: AtomicUsize,
    pub freed: AtomicBool,
}

impl Drop for StreamInner {
    fn drop(&mut self) {
        if self.kind == StreamKind::SerialContext && !self.freed.swap(true, Ordering::AcqRel) {
            reset_vci(&self.shared, self.vci);
            self.shared.pool.release(self.vci);
        }
    }
}

/// A local serial execution context, or the null stream.
#[derive(Clone)]
pub struct Stream(Option<Arc<StreamInner>>);

impl std::fmt::Debug for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.0 {
            None => f.write_str("Stream::NULL"),
            Some(s) => write!(f, "Stream({}, {:?}, vci {})", s.id, s.kind, s.vci),
        }
    }
}

impl Stream {
    /// "No stream": streamless traffic and general progress.
    pub const NULL: Stream = Stream(None);

    pub fn is_null(&self) -> bool {
        self.0.is_none()
    }

    pub fn kind(&self) -> StreamKind {
        self.0.as_ref().map_or(StreamKind::Null, |s| s.kind)
    }

    /// Process-unique id; `None` for the null stream.
    pub fn id(&self) -> Option<u64> {
        self.0.as_ref().map(|s| s.id)
    }

    /// The VCI this stream drives.
    pub fn vci(&self) -> Option<usize> {
        self.0.as_ref().map(|s| s.vci)
    }

    pub fn device_queue(&self) -> Option<&DeviceQueue> {
        self.0.as_ref().and_then(|s| s.device.as_ref())
    }

    pub fn is_freed(&self) -> bool {
        self.0.as_ref().is_some_and(|s| s.freed.load(Ordering::Acquire))
    }

    pub(crate) fn inner(&self) -> Option<&Arc<StreamInner>> {
        self.0.as_ref()
    }

    /// The VCI to drive on `s`, checking the stream is live and local.
    pub(crate) fn vci_for(&self, s: &Shared) -> Result<Option<usize>> {
        match &self.0 {
            None => Ok(None),
            Some(i) => {
                if i.freed.load(Ordering::Acquire) {
                    return Err(Error::arg(format!("stream {} has been freed", i.id)));
                }
                if !std::ptr::eq(&*i.shared, s) {
                    return Err(Error::arg("stream belongs to another runtime instance"));
                }
                Ok(Some(i.vci))
            }
        }
    }

    /// Returns the stream's resources. On success this handle becomes the
    /// null stream; other clones of it report `Arg` on use.
    pub fn free(&mut self) -> Result<()> {
        let Some(i) = &self.0 else {
            return Err(Error::arg("cannot free the null stream"));
        };
        i.shared.check_live()?;
        if i.freed.load(Ordering::Acquire) {
            return Err(Error::arg(format!("stream {} has already been freed", i.id)));
        }
        if i.attached.load(Ordering::Acquire) > 0 {
            return Err(Error::pending(format!(
                "stream {} is still attached to a communicator",
                i.id
            )));
        }
        if i.progress_threads.load(Ordering::Acquire) > 0 {
            return Err(Error::pending(format!("stream {} has a running progress thread", i.id)));
        }
        if i.kind == StreamKind::SerialContext && !i.freed.swap(true, Ordering::AcqRel) {
            reset_vci(&i.shared, i.vci);
            i.shared.pool.release(i.vci);
        }
        i.freed.store(true, Ordering::Release);
        self.0 = None;
        Ok(())
    }
}

impl Instance {
    /// Creates a stream.
    ///
    /// Without info (or with an empty one) the stream is a serial context
    /// with a dedicated VCI from the pool. With `type = "devstream"` and a
    /// hex `value` naming a registered [`DeviceQueue`] handle, it is bound to
    /// that queue.
    pub fn stream_create(&self, info: Option<&Info>) -> Result<Stream> {
        let s = &self.shared;
        s.check_live()?;
        let info = info.filter(|i| !i.is_empty());
        let (kind, vci, device) = match info {
            None => {
                let v = s.pool.alloc()?;
                (StreamKind::SerialContext, v, None)
            }
            Some(info) => {
                let ty = info
                    .get("type")
                    .ok_or_else(|| Error::arg("stream info needs a \"type\" key"))?;
                match ty {
                    "devstream" => {}
                    "cudaStream_t" => {
                        return Err(Error::Unsupported(
                            "CUDA streams are not available; use a \"devstream\" device queue".into(),
                        ))
                    }
                    other => return Err(Error::Unsupported(format!("stream type {other:?}"))),
                }
                let raw = info
                    .get_hex("value")?
                    .ok_or_else(|| Error::arg("devstream info needs a hex \"value\""))?;
                let bytes: [u8; 8] = raw
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::arg(format!("device queue handle must be 8 bytes, got {}", raw.len())))?;
                let q = offload::lookup(u64::from_ne_bytes(bytes))?;
                let v = q.handle() as usize % s.nimpl;
                (StreamKind::DeviceQueue, v, Some(q))
            }
        };
        Ok(Stream(Some(Arc::new(StreamInner {
            id: NEXT_STREAM_ID.fetch_add(1, Ordering::Relaxed),
            kind,
            vci,
            shared: s.clone(),
            device,
            attached: AtomicUsize::new(0),
            progress_threads: AtomicUsize::new(0),
            freed: AtomicBool::new(false),
        }))))
    }

    /// `(allocated, capacity)` of the explicit VCI pool.
    pub fn vci_pool_usage(&self) -> (usize, usize) {
        self.shared.pool.usage()
    }
}
