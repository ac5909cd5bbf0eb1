//! Communicators: world and duplicates, stream communicators, thread
//! communicators, and the small set of collectives the runtime needs.

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use rustc_hash::FxHashMap;

use crate::datatype::{BasicKind, Datatype};
use crate::error::{Error, Result};
use crate::p2p::{SendSrc, Status};
use crate::runtime::Shared;
use crate::stream::{reset_vci, Stream};
use crate::transport::frame::{Addr, Envelope};
use crate::transport::vci::Pattern;
use crate::transport::Fabric;

pub const ANY_SOURCE: i32 = -1;
pub const ANY_TAG: i32 = -1;
/// Wildcard source stream index for multiplex receives.
pub const ANY_STREAM: i32 = -1;

/// Set on the context id of a communicator's internal collective traffic.
pub(crate) const COLL_CTX_BIT: u32 = 1 << 31;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    /// Thread-communicator slots held by this thread, keyed by comm uid.
    static SLOTS: RefCell<FxHashMap<u64, usize>> = RefCell::new(FxHashMap::default());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommKind {
    Conventional,
    StreamSingle,
    StreamMultiplex,
    Threadcomm,
}

#[derive(Default)]
struct TcSync {
    arrived: usize,
    departed: usize,
    active: bool,
    generation: u64,
}

pub(crate) struct Threadcomm {
    /// First thread rank of each process, plus the total at the end.
    prefix: Vec<usize>,
    local: usize,
    sync: Mutex<TcSync>,
    cv: Condvar,
}

impl Threadcomm {
    fn proc_of(&self, rank: usize) -> usize {
        self.prefix.partition_point(|&p| p <= rank) - 1
    }
}

/// Where a send goes and what it carries.
pub(crate) struct SendRoute {
    pub dst: Addr,
    pub env: Envelope,
    pub src_vci: usize,
    /// Same-process thread-communicator peer: use the in-memory path.
    pub local: bool,
}

pub(crate) struct CommInner {
    pub shared: Arc<Shared>,
    pub uid: u64,
    pub ctx: u32,
    pub kind: CommKind,
    /// Process index in this communicator -> world rank.
    pub procs: Vec<usize>,
    pub me: usize,
    /// Local streams, by endpoint index.
    pub streams: Vec<Stream>,
    /// Per process, the VCI behind each endpoint index. Empty when the
    /// communicator has no endpoints of its own.
    pub eps: Vec<Vec<usize>>,
    pub tc: Option<Threadcomm>,
    freed: AtomicBool,
    routes: Vec<(u32, i32)>,
}

impl CommInner {
    fn wire_idx(&self) -> bool {
        !self.eps.is_empty()
    }

    fn coll_ctx(&self, coll: bool) -> u32 {
        if coll {
            self.ctx | COLL_CTX_BIT
        } else {
            self.ctx
        }
    }

    pub(crate) fn size(&self) -> usize {
        match &self.tc {
            Some(tc) => *tc.prefix.last().expect("prefix"),
            None => self.procs.len(),
        }
    }

    /// The calling thread's slot on a thread communicator.
    fn slot(&self) -> Result<usize> {
        let tc = self.tc.as_ref().expect("thread communicator");
        if !tc.sync.lock().unwrap().active {
            return Err(Error::state("thread communicator is not active"));
        }
        SLOTS
            .with(|m| m.borrow().get(&self.uid).copied())
            .ok_or_else(|| Error::state("calling thread has not started this thread communicator"))
    }

    pub(crate) fn rank_for_caller(&self) -> usize {
        match &self.tc {
            Some(tc) => tc.prefix[self.me] + self.slot().unwrap_or(0),
            None => self.me,
        }
    }

    fn check_peer(&self, r: i32, what: &str) -> Result<usize> {
        let n = self.size();
        if r < 0 || r as usize >= n {
            return Err(Error::arg(format!("{what} rank {r} out of range for size {n}")));
        }
        Ok(r as usize)
    }

    fn check_tag(tag: i32, recv: bool) -> Result<()> {
        if tag < 0 && !(recv && tag == ANY_TAG) {
            return Err(Error::arg(format!("invalid tag {tag}")));
        }
        Ok(())
    }

    /// Resolves a send. `idx` is `(src, dst)` endpoint indices for
    /// multiplex traffic; other kinds ignore it.
    pub(crate) fn send_route(&self, dest: i32, tag: i32, idx: Option<(i32, i32)>, coll: bool) -> Result<SendRoute> {
        self.shared.check_live()?;
        let dest = self.check_peer(dest, "destination")?;
        if !coll {
            Self::check_tag(tag, false)?;
        }
        let ctx = self.coll_ctx(coll);
        let s = &self.shared;
        if let Some(tc) = &self.tc {
            let slot = self.slot()?;
            let p = tc.proc_of(dest);
            let dslot = dest - tc.prefix[p];
            let env = Envelope {
                ctx,
                src_rank: (tc.prefix[self.me] + slot) as i32,
                dst_rank: dest as i32,
                tag,
                src_idx: slot as i32,
                dst_idx: dslot as i32,
            };
            return Ok(SendRoute {
                dst: Addr {
                    world: self.procs[p] as u32,
                    vci: self.eps[p][dslot] as u32,
                },
                env,
                src_vci: self.eps[self.me][slot],
                local: p == self.me,
            });
        }
        let mut env = Envelope {
            ctx,
            src_rank: self.me as i32,
            dst_rank: dest as i32,
            tag,
            src_idx: -1,
            dst_idx: -1,
        };
        if coll || !self.wire_idx() {
            let v = s.implicit_vci(ctx);
            return Ok(SendRoute {
                dst: Addr {
                    world: self.procs[dest] as u32,
                    vci: v as u32,
                },
                env,
                src_vci: v,
                local: false,
            });
        }
        let (si, di) = idx.unwrap_or((0, 0));
        let (mine, theirs) = (&self.eps[self.me], &self.eps[dest]);
        if si < 0 || si as usize >= mine.len() {
            return Err(Error::arg(format!(
                "source stream index {si} out of range ({} local streams)",
                mine.len()
            )));
        }
        if di < 0 || di as usize >= theirs.len() {
            return Err(Error::arg(format!(
                "destination stream index {di} out of range ({} streams at rank {dest})",
                theirs.len()
            )));
        }
        env.src_idx = si;
        env.dst_idx = di;
        Ok(SendRoute {
            dst: Addr {
                world: self.procs[dest] as u32,
                vci: theirs[di as usize] as u32,
            },
            env,
            src_vci: mine[si as usize],
            local: false,
        })
    }

    /// Resolves a receive to the VCI it is posted on and its pattern.
    pub(crate) fn recv_route(
        &self,
        src: i32,
        tag: i32,
        idx: Option<(i32, i32)>,
        coll: bool,
    ) -> Result<(usize, Pattern)> {
        self.shared.check_live()?;
        if src != ANY_SOURCE {
            self.check_peer(src, "source")?;
        }
        if !coll {
            Self::check_tag(tag, true)?;
        }
        let ctx = self.coll_ctx(coll);
        let mut pat = Pattern {
            ctx,
            src,
            tag,
            src_idx: -1,
            dst_idx: -1,
        };
        if self.tc.is_some() {
            let slot = self.slot()?;
            pat.dst_idx = slot as i32;
            return Ok((self.eps[self.me][slot], pat));
        }
        if coll || !self.wire_idx() {
            return Ok((self.shared.implicit_vci(ctx), pat));
        }
        let (si, di) = idx.unwrap_or((ANY_STREAM, 0));
        let mine = &self.eps[self.me];
        if di < 0 || di as usize >= mine.len() {
            return Err(Error::arg(format!(
                "destination stream index {di} out of range ({} local streams)",
                mine.len()
            )));
        }
        if si != ANY_STREAM {
            let limit = if src == ANY_SOURCE {
                self.eps.iter().map(Vec::len).max().unwrap_or(0)
            } else {
                self.eps[src as usize].len()
            };
            if si < 0 || si as usize >= limit {
                return Err(Error::arg(format!("source stream index {si} out of range")));
            }
        }
        pat.src_idx = si;
        pat.dst_idx = di;
        Ok((mine[di as usize], pat))
    }

    /// Any unfinished receive or transfer on this communicator's VCIs.
    fn has_pending(&self) -> bool {
        let s = &self.shared;
        let mut vcis = vec![s.implicit_vci(self.ctx)];
        if let Some(mine) = self.eps.get(self.me) {
            vcis.extend(mine.iter().copied());
        }
        vcis.sort_unstable();
        vcis.dedup();
        let ours = |c: u32| c & !COLL_CTX_BIT == self.ctx;
        vcis.into_iter().any(|v| {
            let mut g = s.enter(v);
            let st = g.state();
            st.posted.iter().any(|p| ours(p.pat.ctx))
                || st.sends.values().any(|x| ours(x.env.ctx))
                || st.recvs.values().any(|x| ours(x.env.ctx))
        })
    }

    fn detach(&self) {
        for st in &self.streams {
            if let Some(i) = st.inner() {
                i.attached.fetch_sub(1, Ordering::AcqRel);
            }
        }
    }

    fn release_slots(&self) {
        if self.tc.is_some() {
            for &v in &self.eps[self.me] {
                reset_vci(&self.shared, v);
                self.shared.pool.release(v);
            }
        }
    }
}

impl Drop for CommInner {
    fn drop(&mut self) {
        if let Fabric::Socket(net) = &self.shared.fabric {
            for &(ctx, idx) in &self.routes {
                net.router.unregister(ctx, idx);
            }
        }
        if !self.freed.swap(true, Ordering::AcqRel) {
            self.detach();
            self.release_slots();
            if let Some(tc) = &self.tc {
                if tc.sync.lock().unwrap().active {
                    self.shared.active_threadcomms.fetch_sub(1, Ordering::AcqRel);
                }
            }
        }
    }
}

/// A communicator handle.
pub struct Comm {
    pub(crate) inner: Arc<CommInner>,
}

impl std::fmt::Debug for Comm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Comm({:?}, ctx {}, size {})",
            self.inner.kind,
            self.inner.ctx,
            self.inner.size()
        )
    }
}

/// Reduction operator. Only summation is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Sum,
}

const TAG_BARRIER: i32 = 0;
const TAG_GATHER: i32 = 1 << 20;
const TAG_BCAST: i32 = (1 << 20) + 1;

fn put_u32(v: &mut Vec<u8>, x: u32) {
    v.extend_from_slice(&x.to_le_bytes());
}

fn get_u32(b: &[u8], i: usize) -> Result<u32> {
    b.get(i * 4..i * 4 + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::transport("short creation exchange"))
}

impl Comm {
    pub(crate) fn world(shared: Arc<Shared>) -> Comm {
        let size = shared.size;
        let me = shared.rank;
        Comm {
            inner: Arc::new(CommInner {
                shared,
                uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
                ctx: 0,
                kind: CommKind::Conventional,
                procs: (0..size).collect(),
                me,
                streams: Vec::new(),
                eps: Vec::new(),
                tc: None,
                freed: AtomicBool::new(false),
                routes: Vec::new(),
            }),
        }
    }

    pub(crate) fn live(&self) -> Result<&CommInner> {
        let c = &*self.inner;
        c.shared.check_live()?;
        if c.freed.load(Ordering::Acquire) {
            return Err(Error::arg("communicator has been freed"));
        }
        Ok(c)
    }

    pub fn kind(&self) -> CommKind {
        self.inner.kind
    }

    /// Context id, identical on every member.
    pub fn context_id(&self) -> u32 {
        self.inner.ctx
    }

    pub fn size(&self) -> usize {
        self.inner.size()
    }

    /// This member's rank. On a thread communicator it is the calling
    /// thread's rank while active, and the process's first rank otherwise.
    pub fn rank(&self) -> usize {
        self.inner.rank_for_caller()
    }

    pub fn is_threadcomm(&self) -> bool {
        self.inner.kind == CommKind::Threadcomm
    }

    /// Number of local streams (endpoints) on this communicator.
    pub fn local_stream_count(&self) -> usize {
        self.inner.eps.get(self.inner.me).map_or(0, Vec::len)
    }

    /// Number of stream indices process-rank `rank` exposes. A process that
    /// attached the null stream still exposes index 0 on an implicit VCI.
    pub fn remote_stream_count(&self, rank: usize) -> Option<usize> {
        if self.inner.tc.is_some() {
            return None;
        }
        Some(self.inner.eps.get(rank).map_or(0, Vec::len))
    }

    /// VCIs this process uses for the communicator's endpoints.
    pub fn local_vcis(&self) -> Vec<usize> {
        match self.inner.eps.get(self.inner.me) {
            Some(v) => v.clone(),
            None => vec![self.inner.shared.implicit_vci(self.inner.ctx)],
        }
    }

    /// The local stream attached at `idx`.
    pub fn get_stream(&self, idx: usize) -> Result<Stream> {
        let c = self.live()?;
        match c.kind {
            CommKind::Conventional | CommKind::Threadcomm if idx == 0 => Ok(Stream::NULL),
            CommKind::StreamSingle if idx == 0 => Ok(c.streams.first().cloned().unwrap_or(Stream::NULL)),
            CommKind::StreamMultiplex if idx < c.streams.len() => Ok(c.streams[idx].clone()),
            _ => Err(Error::arg(format!(
                "no stream at index {idx} on a {:?} communicator",
                c.kind
            ))),
        }
    }

    fn process_level(&self) -> Result<&CommInner> {
        let c = self.live()?;
        if c.tc.is_some() {
            return Err(Error::arg("operation is not available on a thread communicator"));
        }
        Ok(c)
    }

    /// Collective creation: agrees on a context id and exchanges each
    /// process's endpoint list (`None` for "no endpoint of its own").
    fn create(
        &self,
        kind: CommKind,
        local: Option<Vec<usize>>,
        streams: Vec<Stream>,
        tc_local: Option<usize>,
    ) -> Result<Comm> {
        let c = self.process_level()?;
        let s = &c.shared;
        let mut msg = Vec::new();
        put_u32(&mut msg, s.next_ctx.load(Ordering::Acquire));
        match &local {
            None => put_u32(&mut msg, u32::MAX),
            Some(v) => {
                put_u32(&mut msg, v.len() as u32);
                v.iter().for_each(|&x| put_u32(&mut msg, x as u32));
            }
        }
        let all = self.allgather_bytes(&msg)?;
        let mut ctx = 0;
        let mut lists = Vec::with_capacity(all.len());
        for b in &all {
            ctx = ctx.max(get_u32(b, 0)?);
            let n = get_u32(b, 1)?;
            lists.push(if n == u32::MAX {
                None
            } else {
                Some(
                    (0..n as usize)
                        .map(|i| get_u32(b, 2 + i).map(|x| x as usize))
                        .collect::<Result<Vec<_>>>()?,
                )
            });
        }
        if ctx >= COLL_CTX_BIT {
            return Err(Error::Exhausted("context ids exhausted".into()));
        }
        s.next_ctx.fetch_max(ctx + 1, Ordering::AcqRel);
        let implicit = s.implicit_vci(ctx);
        let eps: Vec<Vec<usize>> = if lists.iter().all(Option::is_none) {
            Vec::new()
        } else {
            lists.into_iter().map(|l| l.unwrap_or_else(|| vec![implicit])).collect()
        };
        let tc = tc_local.map(|n| {
            let mut prefix = vec![0];
            for e in &eps {
                prefix.push(prefix.last().unwrap() + e.len());
            }
            Threadcomm {
                prefix,
                local: n,
                sync: Mutex::new(TcSync::default()),
                cv: Condvar::new(),
            }
        });
        let mut routes = Vec::new();
        if let (Fabric::Socket(net), Some(mine)) = (&s.fabric, eps.get(c.me)) {
            for (i, &v) in mine.iter().enumerate() {
                net.router.register(ctx, i as i32, v);
                routes.push((ctx, i as i32));
                if tc.is_some() {
                    net.router.register(ctx | COLL_CTX_BIT, i as i32, v);
                    routes.push((ctx | COLL_CTX_BIT, i as i32));
                }
            }
        }
        for st in &streams {
            if let Some(i) = st.inner() {
                i.attached.fetch_add(1, Ordering::AcqRel);
            }
        }
        Ok(Comm {
            inner: Arc::new(CommInner {
                shared: s.clone(),
                uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
                ctx,
                kind,
                procs: c.procs.clone(),
                me: c.me,
                streams,
                eps,
                tc,
                freed: AtomicBool::new(false),
                routes,
            }),
        })
    }

    /// New conventional communicator with the same group. Collective.
    pub fn dup(&self) -> Result<Comm> {
        let c = self.process_level()?;
        if c.kind != CommKind::Conventional {
            return Err(Error::arg(format!("cannot duplicate a {:?} communicator", c.kind)));
        }
        self.create(CommKind::Conventional, None, Vec::new(), None)
    }

    fn stream_vci(&self, st: &Stream) -> Result<usize> {
        let s = &self.inner.shared;
        match st.vci_for(s) {
            Ok(Some(v)) => Ok(v),
            Ok(None) => Err(Error::arg("null stream")),
            Err(e) if st.is_freed() => Err(Error::pending(e.to_string())),
            Err(e) => Err(e),
        }
    }

    /// Communicator routed through `stream` on this process. Collective;
    /// processes may pass [`Stream::NULL`]. When every process does, the
    /// result behaves exactly like a duplicate of `self`.
    pub fn stream_comm_create(&self, stream: &Stream) -> Result<Comm> {
        self.process_level()?;
        let local = match stream.is_null() {
            true => None,
            false => Some(vec![self.stream_vci(stream)?]),
        };
        let streams = if stream.is_null() {
            Vec::new()
        } else {
            vec![stream.clone()]
        };
        self.create(CommKind::StreamSingle, local, streams, None)
    }

    /// Communicator whose stream indices address several local streams.
    /// Collective; counts may differ between processes but must be ≥ 1.
    pub fn stream_comm_create_multiplex(&self, streams: &[Stream]) -> Result<Comm> {
        self.process_level()?;
        if streams.is_empty() {
            return Err(Error::arg("multiplex stream communicator needs at least one stream"));
        }
        let vcis = streams
            .iter()
            .map(|st| self.stream_vci(st))
            .collect::<Result<Vec<_>>>()?;
        self.create(CommKind::StreamMultiplex, Some(vcis), streams.to_vec(), None)
    }

    /// Inactive thread communicator with `num_threads` ranks on this
    /// process. Ranks are numbered in process order. Collective.
    pub fn threadcomm_init(&self, num_threads: usize) -> Result<Comm> {
        let c = self.process_level()?;
        if num_threads < 1 {
            return Err(Error::arg("a thread communicator needs at least one thread"));
        }
        let slots = c.shared.pool.alloc_many(num_threads)?;
        match self.create(CommKind::Threadcomm, Some(slots.clone()), Vec::new(), Some(num_threads)) {
            Ok(tc) => Ok(tc),
            Err(e) => {
                slots.into_iter().for_each(|v| c.shared.pool.release(v));
                Err(e)
            }
        }
    }

    /// Joins the calling thread to an inactive thread communicator and
    /// returns its rank. Blocks until every local thread has arrived.
    pub fn threadcomm_start(&self) -> Result<usize> {
        let c = self.live()?;
        let tc = c.tc.as_ref().ok_or_else(|| Error::arg("not a thread communicator"))?;
        if SLOTS.with(|m| m.borrow().contains_key(&c.uid)) {
            return Err(Error::state("thread already started this thread communicator"));
        }
        let mut st = tc.sync.lock().unwrap();
        if st.active || st.arrived >= tc.local {
            return Err(Error::state(format!(
                "more than {} threads started the thread communicator",
                tc.local
            )));
        }
        let slot = st.arrived;
        st.arrived += 1;
        SLOTS.with(|m| m.borrow_mut().insert(c.uid, slot));
        if st.arrived == tc.local {
            st.active = true;
            st.generation += 1;
            c.shared.active_threadcomms.fetch_add(1, Ordering::AcqRel);
            tc.cv.notify_all();
        } else {
            let g = st.generation;
            let _st = tc.cv.wait_while(st, |s| s.generation == g).unwrap();
        }
        Ok(tc.prefix[c.me] + slot)
    }

    /// Leaves the active thread communicator. Blocks until every local
    /// thread has left; the last one deactivates it.
    pub fn threadcomm_finish(&self) -> Result<()> {
        let c = self.live()?;
        let tc = c.tc.as_ref().ok_or_else(|| Error::arg("not a thread communicator"))?;
        if SLOTS.with(|m| m.borrow_mut().remove(&c.uid)).is_none() {
            return Err(Error::state("calling thread has not started this thread communicator"));
        }
        let mut st = tc.sync.lock().unwrap();
        st.departed += 1;
        if st.departed == tc.local {
            st.active = false;
            st.arrived = 0;
            st.departed = 0;
            st.generation += 1;
            c.shared.active_threadcomms.fetch_sub(1, Ordering::AcqRel);
            tc.cv.notify_all();
        } else {
            let g = st.generation;
            let _st = tc.cv.wait_while(st, |s| s.generation == g).unwrap();
        }
        Ok(())
    }

    pub fn threadcomm_is_active(&self) -> bool {
        self.inner.tc.as_ref().is_some_and(|tc| tc.sync.lock().unwrap().active)
    }

    /// Releases the communicator. Fails with `State` on an active thread
    /// communicator and `Pending` while operations are outstanding.
    ///
    /// On a device-queue communicator the release is ordered after the
    /// operations already on the queue: they still run, and no host-side
    /// synchronization is needed first.
    pub fn free(&self) -> Result<()> {
        let c = self.live()?;
        if c.ctx == 0 {
            return Err(Error::arg("the world communicator cannot be freed"));
        }
        if self.threadcomm_is_active() {
            return Err(Error::state("thread communicator is still active"));
        }
        if !c.is_device() && c.has_pending() {
            return Err(Error::pending("communicator has outstanding operations"));
        }
        if !c.freed.swap(true, Ordering::AcqRel) {
            c.detach();
            c.release_slots();
        }
        Ok(())
    }

    /// Same as [`Comm::free`] for thread communicators.
    pub fn threadcomm_free(&self) -> Result<()> {
        if !self.is_threadcomm() {
            return Err(Error::arg("not a thread communicator"));
        }
        self.free()
    }

    // -----------------------------------------------------------------------
    // Collectives: linear gather to rank 0 and broadcast back, plus a
    // dissemination barrier. On a thread communicator every thread is a rank.

    fn coll_send(&self, dest: usize, tag: i32, data: &[u8]) -> Result<()> {
        let c = &*self.inner;
        let r = c.send_route(dest as i32, tag, None, true)?;
        c.send_blocking(SendSrc::Borrowed(data), r)
    }

    fn coll_recv(&self, src: usize, tag: i32, buf: &mut [u8]) -> Result<Status> {
        let c = &*self.inner;
        let (v, pat) = c.recv_route(src as i32, tag, None, true)?;
        c.recv_blocking(buf, v, pat)
    }

    fn coll_recv_vec(&self, src: usize, tag: i32) -> Result<Vec<u8>> {
        let mut len = [0u8; 8];
        self.coll_recv(src, tag, &mut len)?;
        let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
        self.coll_recv(src, tag, &mut buf)?;
        Ok(buf)
    }

    fn coll_send_vec(&self, dest: usize, tag: i32, data: &[u8]) -> Result<()> {
        self.coll_send(dest, tag, &(data.len() as u64).to_le_bytes())?;
        self.coll_send(dest, tag, data)
    }

    pub fn barrier(&self) -> Result<()> {
        self.live()?;
        let n = self.size();
        let r = self.inner.rank_for_caller();
        let (mut k, mut round) = (1, 0);
        while k < n {
            self.coll_send((r + k) % n, TAG_BARRIER + round, &[])?;
            self.coll_recv((r + n - k) % n, TAG_BARRIER + round, &mut [])?;
            k *= 2;
            round += 1;
        }
        Ok(())
    }

    /// Every rank's contribution, in rank order, on every rank.
    pub fn allgather_bytes(&self, mine: &[u8]) -> Result<Vec<Vec<u8>>> {
        self.live()?;
        let n = self.size();
        let r = self.inner.rank_for_caller();
        if r != 0 {
            self.coll_send_vec(0, TAG_GATHER, mine)?;
            let packed = self.coll_recv_vec(0, TAG_BCAST)?;
            return unpack_parts(&packed, n);
        }
        let mut parts = vec![mine.to_vec()];
        for src in 1..n {
            parts.push(self.coll_recv_vec(src, TAG_GATHER)?);
        }
        let mut packed = Vec::new();
        for p in &parts {
            packed.extend_from_slice(&(p.len() as u64).to_le_bytes());
            packed.extend_from_slice(p);
        }
        for dest in 1..n {
            self.coll_send_vec(dest, TAG_BCAST, &packed)?;
        }
        Ok(parts)
    }

    /// Elementwise reduction of `count` elements of `ty` (64-bit integers or
    /// doubles). Doubles are summed in rank order on every rank, so the
    /// result is identical everywhere.
    pub fn allreduce(&self, send: &[u8], recv: &mut [u8], count: usize, ty: &Datatype, op: Op) -> Result<()> {
        self.live()?;
        let Op::Sum = op;
        let kind = ty.basic_kind();
        if !matches!(kind, Some(BasicKind::Int64) | Some(BasicKind::Double)) {
            return Err(Error::arg(format!("allreduce supports int64 and double, not {ty}")));
        }
        let n = count * 8;
        if send.len() < n || recv.len() < n {
            return Err(Error::arg(format!("allreduce buffers need {n} bytes")));
        }
        if count == 0 {
            return Ok(());
        }
        let parts = self.allgather_bytes(&send[..n])?;
        for i in 0..count {
            let at = |p: &Vec<u8>| -> [u8; 8] { p[i * 8..i * 8 + 8].try_into().unwrap() };
            let out = if kind == Some(BasicKind::Int64) {
                parts
                    .iter()
                    .map(|p| i64::from_ne_bytes(at(p)))
                    .fold(0i64, i64::wrapping_add)
                    .to_ne_bytes()
            } else {
                parts
                    .iter()
                    .map(|p| f64::from_ne_bytes(at(p)))
                    .sum::<f64>()
                    .to_ne_bytes()
            };
            recv[i * 8..i * 8 + 8].copy_from_slice(&out);
        }
        Ok(())
    }

    /// Sum of one `i64` per rank.
    pub fn allreduce_sum_i64(&self, v: i64) -> Result<i64> {
        let mut out = [0u8; 8];
        self.allreduce(&v.to_ne_bytes(), &mut out, 1, &crate::datatype::INT64, Op::Sum)?;
        Ok(i64::from_ne_bytes(out))
    }

    /// Sum of one `f64` per rank.
    pub fn allreduce_sum_f64(&self, v: f64) -> Result<f64> {
        let mut out = [0u8; 8];
        self.allreduce(&v.to_ne_bytes(), &mut out, 1, &crate::datatype::DOUBLE, Op::Sum)?;
        Ok(f64::from_ne_bytes(out))
    }
}

fn unpack_parts(b: &[u8], n: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for _ in 0..n {
        let len = b
            .get(at..at + 8)
            .map(|s| u64::from_le_bytes(s.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::transport("short gather payload"))?;
        at += 8;
        out.push(
            b.get(at..at + len)
                .ok_or_else(|| Error::transport("short gather payload"))?
                .to_vec(),
        );
        at += len;
    }
    Ok(out)
}
