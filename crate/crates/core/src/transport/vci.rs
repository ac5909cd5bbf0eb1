//! Virtual communication interfaces: one matching engine per channel set.
//!
//! Producers (remote senders, socket readers, local threads) only ever push
//! into a VCI's lock-free inbox. Everything else (posted and unexpected
//! queues, rendezvous tables, sequence counters) is touched only by whoever
//! currently holds the VCI: the global lock, the per-VCI lock, or for
//! stream-bound VCIs the stream's owner under its serial-context promise.

use std::cell::UnsafeCell;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use bytes::Bytes;
use crossbeam::queue::SegQueue;
use rustc_hash::FxHashMap;
use smallvec::SmallVec;

use super::frame::{Addr, Envelope, Frame};
use crate::datatype::{Datatype, Layout};
use crate::error::Error;
use crate::p2p::Status;
use crate::request::{GreqCore, ReqInner};

/// Messages at or below this size travel between threads of one process by
/// value; larger ones are copied once, straight from the sender's buffer.
pub(crate) const CELL_THRESHOLD: usize = 16 * 1024;

pub(crate) enum Incoming {
    Frame(Frame),
    Local(LocalMsg),
}

pub(crate) struct LocalMsg {
    pub env: Envelope,
    pub data: LocalData,
}

pub(crate) enum LocalData {
    /// Copied out of the sender at send time; no sender request exists.
    Cell(SmallVec<[u8; 64]>),
    /// The receiver copies straight from the sender's region, then completes
    /// `done`. Either `keep` pins owned sender data, or the sender blocks on
    /// `done` so the region stays valid.
    Region {
        ptr: *const u8,
        len: usize,
        keep: Option<Bytes>,
        done: Option<Arc<ReqInner>>,
    },
}

// SAFETY: the region pointer is either backed by `keep` or by a sender that
// blocks until `done` completes; the receiver only reads it.
unsafe impl Send for LocalData {}

/// Receive-side pattern. `src`, `tag` and `src_idx` may be -1 (wildcard).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pattern {
    pub ctx: u32,
    pub src: i32,
    pub tag: i32,
    pub src_idx: i32,
    pub dst_idx: i32,
}

impl Pattern {
    #[inline]
    pub fn matches(&self, e: &Envelope) -> bool {
        self.ctx == e.ctx
            && self.dst_idx == e.dst_idx
            && (self.src == -1 || self.src == e.src_rank)
            && (self.tag == -1 || self.tag == e.tag)
            && (self.src_idx == -1 || self.src_idx == e.src_idx)
    }
}

pub(crate) struct Posted {
    pub pat: Pattern,
    pub req: Arc<ReqInner>,
}

pub(crate) enum UnexpectedBody {
    Eager(Bytes),
    Rts { send_id: u64, total: u64, ret: Addr },
    Local(LocalData),
}

pub(crate) struct Unexpected {
    pub env: Envelope,
    pub body: UnexpectedBody,
}

/// Where a receive lands.
pub(crate) enum RecvBuf {
    Owned(Vec<u8>),
    /// Caller-owned memory that outlives the request (blocking receives).
    Raw(*mut u8, usize),
}

// SAFETY: raw buffers are only used by blocking receives, whose caller waits
// for completion before the memory can be released.
unsafe impl Send for RecvBuf {}

impl RecvBuf {
    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        match self {
            RecvBuf::Owned(v) => v,
            // SAFETY: see the Send impl.
            RecvBuf::Raw(p, n) => unsafe { std::slice::from_raw_parts_mut(*p, *n) },
        }
    }
}

pub(crate) struct RecvTarget {
    pub buf: RecvBuf,
    /// `None` means the buffer is filled as raw bytes.
    pub layout: Option<(Datatype, u64)>,
    /// Packed bytes for non-contiguous layouts, unpacked on completion.
    pub staging: Vec<u8>,
    pub capacity: usize,
    pub elem_size: u64,
    pub stream_status: bool,
}

impl RecvTarget {
    pub fn bytes(buf: RecvBuf) -> RecvTarget {
        let capacity = match &buf {
            RecvBuf::Owned(v) => v.len(),
            RecvBuf::Raw(_, n) => *n,
        };
        RecvTarget {
            buf,
            layout: None,
            staging: Vec::new(),
            capacity,
            elem_size: 1,
            stream_status: false,
        }
    }

    /// `count` elements of `ty` laid out in `buf`.
    pub fn typed(mut buf: RecvBuf, count: u64, ty: &Datatype) -> Result<RecvTarget, Error> {
        if !ty.is_committed() {
            return Err(Error::arg("receive datatype is not committed"));
        }
        let layout = Layout::new(ty, count);
        let capacity = layout.size() as usize;
        let need = layout.span_end();
        if layout.segments() > 0 && need > buf.as_mut_slice().len() as i64 {
            return Err(Error::arg(format!(
                "receive buffer of {} bytes cannot hold {count} elements of {ty} ({need} bytes)",
                buf.as_mut_slice().len()
            )));
        }
        let contiguous = layout.contiguous_len().is_some();
        Ok(RecvTarget {
            buf,
            layout: if contiguous { None } else { Some((ty.clone(), count)) },
            staging: Vec::new(),
            capacity,
            elem_size: ty.size(),
            stream_status: false,
        })
    }

    /// Sets up status for an incoming message of `total` packed bytes.
    pub fn begin(&mut self, st: &mut Status, env: &Envelope, total: usize) {
        st.source = env.src_rank;
        st.tag = env.tag;
        st.source_stream_idx = if self.stream_status { env.src_idx } else { -1 };
        let kept = total.min(self.capacity);
        st.bytes = kept;
        st.count = if self.elem_size == 0 {
            0
        } else {
            kept / self.elem_size as usize
        };
        if total > self.capacity {
            st.error = Some(Error::Truncate {
                incoming: total,
                capacity: self.capacity,
            });
        }
        if self.layout.is_some() {
            self.staging = vec![0u8; kept];
        }
    }

    /// Writes packed bytes `[offset, offset + data.len())`, clipped to capacity.
    pub fn write(&mut self, offset: usize, data: &[u8]) {
        if offset >= self.capacity {
            return;
        }
        let n = data.len().min(self.capacity - offset);
        let dst = if self.layout.is_some() {
            &mut self.staging[..]
        } else {
            self.buf.as_mut_slice()
        };
        dst[offset..offset + n].copy_from_slice(&data[..n]);
    }

    pub fn finish(&mut self) {
        if let Some((ty, count)) = &self.layout {
            let staging = std::mem::take(&mut self.staging);
            let layout = Layout::new(ty, *count);
            // Bounds were validated when the target was built.
            let _ = layout.unpack_prefix(&staging, self.buf.as_mut_slice());
        }
    }
}

pub(crate) enum SendData {
    Shared(Bytes),
    /// Caller-owned memory; the caller blocks until the transfer completes.
    Raw(*const u8, usize),
}

unsafe impl Send for SendData {}

impl SendData {
    pub fn as_slice(&self) -> &[u8] {
        match self {
            SendData::Shared(b) => b,
            // SAFETY: see the type docs.
            SendData::Raw(p, n) => unsafe { std::slice::from_raw_parts(*p, *n) },
        }
    }
}

/// Sender half of a rendezvous transfer.
pub(crate) struct SendXfer {
    pub data: SendData,
    pub req: Arc<ReqInner>,
    pub env: Envelope,
    pub peer: Option<(Addr, u64)>,
    pub offset: usize,
}

/// Receiver half of a rendezvous transfer.
pub(crate) struct RecvXfer {
    pub req: Arc<ReqInner>,
    pub env: Envelope,
    pub total: usize,
    pub received: usize,
    pub peer: Addr,
    pub send_id: u64,
}

/// One ordered channel: (context, source rank, destination rank, source index,
/// destination index).
pub(crate) type ChanKey = (u32, i32, i32, i32, i32);

#[derive(Default)]
pub(crate) struct VciState {
    pub posted: VecDeque<Posted>,
    pub unexpected: VecDeque<Unexpected>,
    pub sends: FxHashMap<u64, SendXfer>,
    pub recvs: FxHashMap<u64, RecvXfer>,
    pub next_id: u64,
    pub tx_seq: FxHashMap<ChanKey, u64>,
    pub rx_seq: FxHashMap<ChanKey, u64>,
    pub greqs: Vec<Arc<GreqCore>>,
}

impl VciState {
    pub fn has_pending(&self) -> bool {
        !self.posted.is_empty() || !self.sends.is_empty() || !self.recvs.is_empty()
    }

    pub fn reset(&mut self) {
        *self = VciState::default();
    }
}

/// Per-VCI counters, readable without entering the VCI.
#[derive(Default)]
pub struct VciStats {
    /// Mutual-exclusion regions entered for this VCI.
    pub lock_acquisitions: AtomicU64,
    /// Request objects allocated on the send side.
    pub sender_requests: AtomicU64,
    /// Payload copies performed by receivers on this VCI.
    pub payload_copies: AtomicU64,
}

pub(crate) struct Vci {
    pub id: usize,
    pub inbox: SegQueue<Incoming>,
    pub state: UnsafeCell<VciState>,
    pub lock: Mutex<()>,
    /// Bound to a serial context: entered without any lock.
    pub lock_free: AtomicBool,
    pub greq_count: AtomicUsize,
    #[cfg(debug_assertions)]
    pub busy: AtomicBool,
    pub stats: VciStats,
}

// SAFETY: `state` is only accessed through `VciGuard`, which enforces the
// exclusion rules described in the module docs.
unsafe impl Sync for Vci {}

impl Vci {
    pub fn new(id: usize, lock_free: bool) -> Vci {
        Vci {
            id,
            inbox: SegQueue::new(),
            state: UnsafeCell::new(VciState::default()),
            lock: Mutex::new(()),
            lock_free: AtomicBool::new(lock_free),
            greq_count: AtomicUsize::new(0),
            #[cfg(debug_assertions)]
            busy: AtomicBool::new(false),
            stats: VciStats::default(),
        }
    }

    /// True when a poll would find nothing to do.
    #[inline]
    pub fn idle(&self) -> bool {
        self.inbox.is_empty() && self.greq_count.load(Ordering::Acquire) == 0
    }
}

/// Exclusive access to one VCI's state.
pub(crate) struct VciGuard<'a> {
    pub vci: &'a Vci,
    _lock: Option<std::sync::MutexGuard<'a, ()>>,
}

impl<'a> VciGuard<'a> {
    pub fn new(vci: &'a Vci, lock: Option<std::sync::MutexGuard<'a, ()>>) -> VciGuard<'a> {
        #[cfg(debug_assertions)]
        if vci.busy.swap(true, Ordering::Acquire) {
            crate::transport::fatal(&format!(
                "VCI {} entered concurrently; a stream was used from two threads at once",
                vci.id
            ));
        }
        VciGuard { vci, _lock: lock }
    }

    #[inline]
    pub fn state(&mut self) -> &mut VciState {
        // SAFETY: the guard is the only live accessor.
        unsafe { &mut *self.vci.state.get() }
    }
}

impl Drop for VciGuard<'_> {
    fn drop(&mut self) {
        #[cfg(debug_assertions)]
        self.vci.busy.store(false, Ordering::Release);
    }
}
