//! Requests, generalized requests with progress callbacks, explicit progress
//! and progress threads.

use std::any::{Any, TypeId};
use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::utils::Backoff;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::offload::EnqCore;
use crate::p2p::Status;
use crate::runtime::{Counted, Instance, Shared, LIVE_THREADS};
use crate::stream::Stream;
use crate::transport::vci::{RecvBuf, RecvTarget, VciGuard};

/// Completion state of a point-to-point operation.
///
/// `status` and `target` belong to whoever is advancing the operation (the
/// holder of its VCI) until `done` is set, and to the waiter afterwards.
pub(crate) struct ReqInner {
    done: AtomicBool,
    status: UnsafeCell<Status>,
    target: UnsafeCell<Option<RecvTarget>>,
}

// SAFETY: see the type docs; `done` is the hand-off point.
unsafe impl Sync for ReqInner {}
unsafe impl Send for ReqInner {}

impl ReqInner {
    pub(crate) fn new_send() -> Arc<ReqInner> {
        Arc::new(ReqInner {
            done: AtomicBool::new(false),
            status: UnsafeCell::new(Status::empty()),
            target: UnsafeCell::new(None),
        })
    }

    pub(crate) fn new_recv(t: RecvTarget) -> Arc<ReqInner> {
        Arc::new(ReqInner {
            done: AtomicBool::new(false),
            status: UnsafeCell::new(Status::empty()),
            target: UnsafeCell::new(Some(t)),
        })
    }

    /// # Safety
    /// Caller must be the current owner (see the type docs).
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn status_mut(&self) -> &mut Status {
        &mut *self.status.get()
    }

    /// # Safety
    /// As for `status_mut`; only receive requests have a target.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn target_mut(&self) -> &mut RecvTarget {
        (*self.target.get()).as_mut().expect("receive request")
    }

    pub(crate) fn complete(&self) {
        self.done.store(true, Ordering::Release);
    }

    #[inline]
    pub(crate) fn is_done(&self) -> bool {
        self.done.load(Ordering::Acquire)
    }

    /// Status and owned receive buffer of a completed request.
    pub(crate) fn finish(&self) -> (Status, Option<Vec<u8>>) {
        debug_assert!(self.is_done());
        // SAFETY: done was observed, so the waiter owns both cells.
        let st = unsafe { (*self.status.get()).clone() };
        let buf = unsafe { (*self.target.get()).take() }.and_then(|t| match t.buf {
            RecvBuf::Owned(v) => Some(v),
            RecvBuf::Raw(..) => None,
        });
        (st, buf)
    }
}

/// Spins until `r` completes, driving progress on `vci`. Streamless waits
/// also sweep the other implicit VCIs and global generalized requests.
pub(crate) fn wait_inner(s: &Shared, r: &ReqInner, vci: usize) {
    let backoff = Backoff::new();
    let implicit = s.is_implicit(vci);
    let mut spins = 0u32;
    while !r.is_done() {
        let mut did = s.poll_vci(vci);
        if implicit && spins.is_multiple_of(16) {
            did |= s.progress_implicit();
        }
        spins = spins.wrapping_add(1);
        if did {
            backoff.reset();
        } else if backoff.is_completed() {
            std::thread::yield_now();
        } else {
            backoff.snooze();
        }
    }
}

enum Kind<'a> {
    Done(Status, Option<Vec<u8>>),
    P2p {
        inner: Arc<ReqInner>,
        shared: &'a Shared,
        vci: usize,
    },
    Greq {
        core: Arc<GreqCore>,
        shared: &'a Shared,
    },
    Enqueued(Arc<EnqCore>),
}

/// Completion handle for a nonblocking operation.
pub struct Request<'a> {
    kind: Kind<'a>,
}

impl std::fmt::Debug for Request<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = match &self.kind {
            Kind::Done(..) => "complete",
            Kind::P2p { .. } => "p2p",
            Kind::Greq { .. } => "generalized",
            Kind::Enqueued(_) => "enqueued",
        };
        write!(f, "Request({k})")
    }
}

fn status_result(st: &Status) -> Result<Status> {
    match &st.error {
        Some(e) => Err(e.clone()),
        None => Ok(st.clone()),
    }
}

impl<'a> Request<'a> {
    pub(crate) fn done(st: Status) -> Request<'a> {
        Request {
            kind: Kind::Done(st, None),
        }
    }

    pub(crate) fn p2p(inner: Arc<ReqInner>, shared: &'a Shared, vci: usize) -> Request<'a> {
        Request {
            kind: Kind::P2p { inner, shared, vci },
        }
    }

    pub(crate) fn enqueued(core: Arc<EnqCore>) -> Request<'a> {
        Request {
            kind: Kind::Enqueued(core),
        }
    }

    pub(crate) fn enq_core(&self) -> Option<&Arc<EnqCore>> {
        match &self.kind {
            Kind::Enqueued(c) => Some(c),
            _ => None,
        }
    }

    /// True for requests issued through an offload queue.
    pub fn is_enqueued(&self) -> bool {
        matches!(self.kind, Kind::Enqueued(_))
    }

    pub fn is_generalized(&self) -> bool {
        matches!(self.kind, Kind::Greq { .. })
    }

    /// Handle for completing a generalized request from anywhere.
    pub fn grequest_handle(&self) -> Option<GrequestHandle> {
        match &self.kind {
            Kind::Greq { core, .. } => Some(GrequestHandle(core.clone())),
            _ => None,
        }
    }

    /// Moves to the completed state if the operation has finished.
    fn settle(&mut self) -> bool {
        let next = match &self.kind {
            Kind::Done(..) => return true,
            Kind::Enqueued(_) => return false,
            Kind::P2p { inner, .. } => {
                if !inner.is_done() {
                    return false;
                }
                let (st, buf) = inner.finish();
                Kind::Done(st, buf)
            }
            Kind::Greq { core, .. } => {
                if !core.is_done() {
                    return false;
                }
                Kind::Done(core.finish(), None)
            }
        };
        self.kind = next;
        true
    }

    /// One progress pass on behalf of this request.
    fn progress_once(&self) -> bool {
        match &self.kind {
            Kind::P2p { shared, vci, .. } => {
                let mut did = shared.poll_vci(*vci);
                if shared.is_implicit(*vci) {
                    did |= shared.progress_implicit();
                }
                did
            }
            Kind::Greq { core, shared } => {
                let mut did = poll_core(core);
                did |= match core.scope {
                    Some(v) => shared.poll_vci(v),
                    None => shared.progress_implicit(),
                };
                did
            }
            _ => false,
        }
    }

    fn host_check(&self) -> Result<()> {
        if self.is_enqueued() {
            return Err(Error::arg(
                "enqueued requests complete on their offload queue; use wait_enqueue",
            ));
        }
        Ok(())
    }

    /// Blocks until completion. Errors recorded in the status (truncation,
    /// callback failures) are returned as `Err`; [`Request::status`] still
    /// exposes the partial status afterwards.
    pub fn wait(&mut self) -> Result<Status> {
        self.host_check()?;
        if let Kind::P2p { inner, shared, vci } = &self.kind {
            wait_inner(shared, inner, *vci);
        } else {
            let backoff = Backoff::new();
            while !self.settle() {
                let mut did = self.progress_once();
                if let Kind::Greq { core, .. } = &self.kind {
                    // A lone request with a wait callback is a batch of one.
                    if let (Some(f), false) = (core.batch, core.is_done()) {
                        if let Err(e) = f(std::slice::from_ref(core), f64::INFINITY) {
                            core.fail(e);
                        }
                        did = true;
                    }
                }
                if did {
                    backoff.reset();
                } else if backoff.is_completed() {
                    std::thread::yield_now();
                } else {
                    backoff.snooze();
                }
            }
        }
        self.settle();
        status_result(self.status().expect("settled"))
    }

    /// One progress pass; `Some(status)` once complete.
    pub fn test(&mut self) -> Result<Option<Status>> {
        self.host_check()?;
        if !self.settle() {
            self.progress_once();
            if !self.settle() {
                return Ok(None);
            }
        }
        status_result(self.status().expect("settled")).map(Some)
    }

    /// Status of a completed request.
    pub fn status(&self) -> Option<&Status> {
        match &self.kind {
            Kind::Done(st, _) => Some(st),
            _ => None,
        }
    }

    /// The receive buffer of a completed `irecv`.
    pub fn take_buffer(&mut self) -> Option<Vec<u8>> {
        match &mut self.kind {
            Kind::Done(_, buf) => buf.take(),
            _ => None,
        }
    }

    /// Cancels a receive that has not matched yet, or a generalized request
    /// through its cancel callback. Returns whether anything was cancelled.
    pub fn cancel(&mut self) -> Result<bool> {
        match &self.kind {
            Kind::P2p { inner, shared, vci } => {
                let removed = {
                    let mut g = shared.enter(*vci);
                    shared.cancel_recv(&mut g, inner)
                };
                if removed {
                    let mut st = Status::empty();
                    st.cancelled = true;
                    self.kind = Kind::Done(st, None);
                }
                Ok(removed)
            }
            Kind::Greq { core, .. } => {
                let done = core.is_done();
                core.body.lock().unwrap().cancel(done)?;
                Ok(!done)
            }
            Kind::Done(..) => Ok(false),
            Kind::Enqueued(_) => Err(Error::arg("enqueued requests cannot be cancelled")),
        }
    }
}

/// Waits for every request.
///
/// When all requests are generalized and share one wait callback, that
/// callback receives the whole batch of states; otherwise each request is
/// progressed in turn. Returns the first recorded error after everything
/// has completed.
pub fn waitall(reqs: &mut [Request<'_>]) -> Result<Vec<Status>> {
    for r in reqs.iter() {
        r.host_check()?;
    }
    let batch = batch_key(reqs);
    let backoff = Backoff::new();
    loop {
        let mut pending = Vec::new();
        for (i, r) in reqs.iter_mut().enumerate() {
            if !r.settle() {
                pending.push(i);
            }
        }
        if pending.is_empty() {
            break;
        }
        let mut did = false;
        if let Some(f) = batch {
            let cores: Vec<_> = pending
                .iter()
                .map(|&i| match &reqs[i].kind {
                    Kind::Greq { core, .. } => core.clone(),
                    _ => unreachable!("batch holds only generalized requests"),
                })
                .collect();
            if let Err(e) = f(&cores, f64::INFINITY) {
                for c in &cores {
                    c.fail(e.clone());
                }
            }
            did = true;
        }
        for &i in &pending {
            did |= reqs[i].progress_once();
        }
        if did {
            backoff.reset();
        } else if backoff.is_completed() {
            std::thread::yield_now();
        } else {
            backoff.snooze();
        }
    }
    let statuses: Vec<Status> = reqs.iter().map(|r| r.status().expect("settled").clone()).collect();
    match statuses.iter().find_map(|s| s.error.clone()) {
        Some(e) => Err(e),
        None => Ok(statuses),
    }
}

fn batch_key(reqs: &[Request<'_>]) -> Option<BatchFn> {
    let mut key = None;
    let mut f = None;
    for r in reqs {
        match &r.kind {
            Kind::Greq { core, .. } => {
                let (k, b) = (core.wait_key?, core.batch?);
                if key.is_some_and(|x| x != k) {
                    return None;
                }
                key = Some(k);
                f = Some(b);
            }
            Kind::Done(..) => {}
            _ => return None,
        }
    }
    f
}

// ---------------------------------------------------------------------------
// Generalized requests

pub type QueryFn<S> = fn(&mut S, &mut Status) -> Result<()>;
pub type FreeFn<S> = fn(&mut S) -> Result<()>;
pub type CancelFn<S> = fn(&mut S, bool) -> Result<()>;
/// Called from progress; completes the request through the handle when the
/// underlying task is done.
pub type PollFn<S> = fn(&mut S, &GrequestHandle) -> Result<()>;
/// Called with a batch of states and the remaining time budget in seconds
/// (infinite for a plain wait). It may return before everything completes.
pub type WaitFn<S> = fn(&mut [&mut S], &[GrequestHandle], f64) -> Result<()>;

/// Callback table for a generalized request over state `S`.
pub struct GrequestFns<S> {
    pub query: QueryFn<S>,
    pub free: FreeFn<S>,
    pub cancel: CancelFn<S>,
    pub poll: Option<PollFn<S>>,
    pub wait: Option<WaitFn<S>>,
}

impl<S> Clone for GrequestFns<S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for GrequestFns<S> {}

trait ErasedGreq: Send {
    fn query(&mut self, st: &mut Status) -> Result<()>;
    fn free(&mut self) -> Result<()>;
    fn cancel(&mut self, done: bool) -> Result<()>;
    fn poll(&mut self, h: &GrequestHandle) -> Result<()>;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

struct Typed<S> {
    state: S,
    fns: GrequestFns<S>,
}

impl<S: Send + 'static> ErasedGreq for Typed<S> {
    fn query(&mut self, st: &mut Status) -> Result<()> {
        (self.fns.query)(&mut self.state, st)
    }

    fn free(&mut self) -> Result<()> {
        (self.fns.free)(&mut self.state)
    }

    fn cancel(&mut self, done: bool) -> Result<()> {
        (self.fns.cancel)(&mut self.state, done)
    }

    fn poll(&mut self, h: &GrequestHandle) -> Result<()> {
        match self.fns.poll {
            Some(p) => p(&mut self.state, h),
            None => Ok(()),
        }
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

type BatchFn = fn(&[Arc<GreqCore>], f64) -> Result<()>;

pub(crate) struct GreqCore {
    done: AtomicBool,
    body: Mutex<Box<dyn ErasedGreq>>,
    has_poll: bool,
    wait_key: Option<(usize, TypeId)>,
    batch: Option<BatchFn>,
    /// VCI whose progress polls this request; `None` for global scope.
    scope: Option<usize>,
    error: Mutex<Option<Error>>,
}

impl GreqCore {
    fn is_done(&self) -> bool {
        self.done.load(Ordering::Acquire)
    }

    fn fail(&self, e: Error) {
        self.error.lock().unwrap().get_or_insert(e);
        self.done.store(true, Ordering::Release);
    }

    /// Runs query and free once the request is complete.
    fn finish(&self) -> Status {
        let mut st = Status::empty();
        let mut body = self.body.lock().unwrap();
        if let Err(e) = body.query(&mut st) {
            st.error.get_or_insert(e);
        }
        if let Err(e) = body.free() {
            st.error.get_or_insert(e);
        }
        if let Some(e) = self.error.lock().unwrap().take() {
            st.error = Some(e);
        }
        st
    }
}

fn batch_wait<S: Send + 'static>(cores: &[Arc<GreqCore>], timeout: f64) -> Result<()> {
    let mut guards: Vec<_> = cores.iter().map(|c| c.body.lock().unwrap()).collect();
    let handles: Vec<_> = cores.iter().map(|c| GrequestHandle(c.clone())).collect();
    let typed = |g: &mut Box<dyn ErasedGreq>| -> *mut Typed<S> {
        g.as_any_mut()
            .downcast_mut::<Typed<S>>()
            .expect("batch shares one state type")
    };
    let wait = unsafe { (*typed(&mut guards[0])).fns.wait }.expect("batch has a wait callback");
    let mut states: Vec<&mut S> = guards
        .iter_mut()
        // SAFETY: each pointer comes from a distinct locked body held in
        // `guards` for the duration of the call.
        .map(|g| unsafe { &mut (*typed(g)).state })
        .collect();
    wait(&mut states, &handles, timeout)
}

/// Cloneable handle that marks a generalized request complete.
#[derive(Clone)]
pub struct GrequestHandle(Arc<GreqCore>);

impl std::fmt::Debug for GrequestHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrequestHandle(done: {})", self.0.is_done())
    }
}

impl GrequestHandle {
    /// Marks the request complete. Completing twice is an `Arg` error.
    pub fn complete(&self) -> Result<()> {
        if self.0.done.swap(true, Ordering::AcqRel) {
            return Err(Error::arg("generalized request completed twice"));
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.0.is_done()
    }
}

/// Polls one request unless it is complete or already being polled.
fn poll_core(c: &Arc<GreqCore>) -> bool {
    if !c.has_poll || c.is_done() {
        return false;
    }
    let Ok(mut body) = c.body.try_lock() else {
        return false;
    };
    if c.is_done() {
        return false;
    }
    if let Err(e) = body.poll(&GrequestHandle(c.clone())) {
        drop(body);
        c.fail(e);
    }
    true
}

#[derive(Default)]
pub(crate) struct GlobalGreqs {
    list: Mutex<Vec<Arc<GreqCore>>>,
    count: AtomicUsize,
}

/// Polls globally scoped generalized requests.
pub(crate) fn poll_global_greqs(s: &Shared) -> bool {
    if s.greqs.count.load(Ordering::Acquire) == 0 {
        return false;
    }
    // Snapshot so callbacks may start new requests.
    let snap: Vec<_> = s.greqs.list.lock().unwrap().clone();
    let mut did = false;
    for c in &snap {
        did |= poll_core(c);
    }
    let mut list = s.greqs.list.lock().unwrap();
    list.retain(|c| !c.is_done());
    s.greqs.count.store(list.len(), Ordering::Release);
    did
}

/// Polls generalized requests bound to the VCI held by `g`.
pub(crate) fn poll_scoped_greqs(g: &mut VciGuard<'_>) -> bool {
    let snap = g.state().greqs.clone();
    let mut did = false;
    for c in &snap {
        did |= poll_core(c);
    }
    let st = g.state();
    st.greqs.retain(|c| !c.is_done());
    g.vci.greq_count.store(g.state().greqs.len(), Ordering::Release);
    did
}

impl Instance {
    /// Starts a generalized request polled by general (streamless) progress.
    pub fn grequest_start<S: Send + 'static>(&self, fns: GrequestFns<S>, state: S) -> Result<Request<'_>> {
        self.grequest_start_on(&Stream::NULL, fns, state)
    }

    /// Starts a generalized request bound to `stream`: progress on that
    /// stream polls it. The null stream means global scope.
    pub fn grequest_start_on<S: Send + 'static>(
        &self,
        stream: &Stream,
        fns: GrequestFns<S>,
        state: S,
    ) -> Result<Request<'_>> {
        let s = &*self.shared;
        s.check_live()?;
        let scope = stream.vci_for(s)?;
        let core = Arc::new(GreqCore {
            done: AtomicBool::new(false),
            body: Mutex::new(Box::new(Typed { state, fns })),
            has_poll: fns.poll.is_some(),
            wait_key: fns.wait.map(|w| (w as usize, TypeId::of::<S>())),
            batch: fns.wait.map(|_| batch_wait::<S> as BatchFn),
            scope,
            error: Mutex::new(None),
        });
        if core.has_poll {
            match scope {
                None => {
                    let mut list = s.greqs.list.lock().unwrap();
                    list.push(core.clone());
                    s.greqs.count.store(list.len(), Ordering::Release);
                }
                Some(v) => {
                    let mut g = s.enter(v);
                    g.state().greqs.push(core.clone());
                    let n = g.state().greqs.len();
                    g.vci.greq_count.store(n, Ordering::Release);
                }
            }
        }
        Ok(Request {
            kind: Kind::Greq { core, shared: s },
        })
    }

    /// One progress pass on a stream's VCI, or on every implicit VCI plus
    /// global generalized requests for the null stream. Returns whether
    /// anything advanced.
    pub fn stream_progress(&self, stream: &Stream) -> Result<bool> {
        let s = &*self.shared;
        s.check_live()?;
        Ok(match stream.vci_for(s)? {
            Some(v) => s.poll_vci(v),
            None => s.progress_implicit(),
        })
    }

    /// Starts a thread that keeps calling [`Instance::stream_progress`] on
    /// `stream`. While it runs it owns the stream's serial context.
    pub fn start_progress_thread(&self, stream: &Stream) -> Result<()> {
        let s = &self.shared;
        s.check_live()?;
        let vci = stream.vci_for(s)?;
        let key = stream.id();
        let mut map = s.progress.map.lock().unwrap();
        if map.contains_key(&key) {
            return Err(Error::state("a progress thread already runs on this stream"));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let (shared, flag) = (s.clone(), stop.clone());
        let token = Counted::new(&LIVE_THREADS);
        let pause = Duration::from_micros(s.cfg.progress_yield_us);
        let handle = std::thread::Builder::new()
            .name("minimpi-progress".into())
            .spawn(move || {
                let _token = token;
                while !flag.load(Ordering::Acquire) {
                    let did = match vci {
                        Some(v) => shared.poll_vci(v),
                        None => shared.progress_implicit(),
                    };
                    if !did {
                        std::thread::sleep(pause);
                    }
                }
            })
            .map_err(|e| Error::state(format!("cannot start progress thread: {e}")))?;
        if let Some(inner) = stream.inner() {
            inner.progress_threads.fetch_add(1, Ordering::AcqRel);
        }
        map.insert(key, (stop, handle, stream.clone()));
        Ok(())
    }

    /// Signals the stream's progress thread and joins it.
    pub fn stop_progress_thread(&self, stream: &Stream) -> Result<()> {
        let entry = self.shared.progress.map.lock().unwrap().remove(&stream.id());
        let Some((stop, handle, st)) = entry else {
            return Err(Error::state("no progress thread runs on this stream"));
        };
        stop.store(true, Ordering::Release);
        let _ = handle.join();
        if let Some(inner) = st.inner() {
            inner.progress_threads.fetch_sub(1, Ordering::AcqRel);
        }
        Ok(())
    }
}

type ProgressEntry = (Arc<AtomicBool>, JoinHandle<()>, Stream);

#[derive(Default)]
pub(crate) struct ProgressThreads {
    map: Mutex<FxHashMap<Option<u64>, ProgressEntry>>,
}

impl ProgressThreads {
    pub(crate) fn running(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub(crate) fn stop_all(&self) {
        let all: Vec<_> = self.map.lock().unwrap().drain().collect();
        for (_, (stop, h, st)) in all {
            stop.store(true, Ordering::Release);
            let _ = h.join();
            if let Some(inner) = st.inner() {
                inner.progress_threads.fetch_sub(1, Ordering::AcqRel);
            }
        }
    }
}
