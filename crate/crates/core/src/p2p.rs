//! Point-to-point operations on every communicator kind.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use bytes::Bytes;
use smallvec::SmallVec;

use crate::comm::{Comm, CommInner, SendRoute};
use crate::datatype::{Datatype, Layout};
use crate::error::{Error, Result};
use crate::request::{wait_inner, ReqInner, Request};
use crate::stream::StreamKind;
use crate::transport::vci::{Incoming, LocalData, LocalMsg, Pattern, RecvBuf, RecvTarget, SendData, CELL_THRESHOLD};

/// Completion information for a receive (or a completed send).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Status {
    pub source: i32,
    pub tag: i32,
    pub error: Option<Error>,
    /// Received elements of the receive datatype.
    pub count: usize,
    pub bytes: usize,
    /// Sender's stream index on multiplex communicators, otherwise -1.
    pub source_stream_idx: i32,
    pub cancelled: bool,
}

impl Status {
    pub fn empty() -> Status {
        Status {
            source: -1,
            tag: -1,
            error: None,
            count: 0,
            bytes: 0,
            source_stream_idx: -1,
            cancelled: false,
        }
    }
}

impl Default for Status {
    fn default() -> Self {
        Status::empty()
    }
}

/// Send payload: caller memory, or shared owned bytes.
pub(crate) enum SendSrc<'a> {
    Borrowed(&'a [u8]),
    Owned(Bytes),
}

impl SendSrc<'_> {
    fn as_slice(&self) -> &[u8] {
        match self {
            SendSrc::Borrowed(b) => b,
            SendSrc::Owned(b) => b,
        }
    }
}

/// Packs `count` elements of `ty` from `buf`, or borrows them in place when
/// the layout is one run from offset 0.
fn packed<'a>(buf: &'a [u8], count: usize, ty: &Datatype) -> Result<SendSrc<'a>> {
    if !ty.is_committed() {
        return Err(Error::arg("send datatype is not committed"));
    }
    let l = Layout::new(ty, count as u64);
    if let Some(n) = l.contiguous_len() {
        return buf
            .get(..n)
            .map(SendSrc::Borrowed)
            .ok_or_else(|| Error::arg(format!("send buffer of {} bytes is shorter than {n}", buf.len())));
    }
    let mut out = vec![0u8; l.size() as usize];
    l.pack(buf, &mut out)?;
    Ok(SendSrc::Owned(out.into()))
}

impl CommInner {
    /// Starts a send. Returns the in-flight request and the VCI to drive, or
    /// `None` once the data has left the caller's buffer.
    ///
    /// With `blocking` set, borrowed memory may be referenced until the
    /// returned request completes; the caller must wait before returning.
    pub(crate) fn start_send(
        &self,
        src: SendSrc<'_>,
        r: SendRoute,
        blocking: bool,
    ) -> Result<Option<(Arc<ReqInner>, usize)>> {
        let s = &*self.shared;
        let len = src.as_slice().len();
        if r.local {
            let inbox = &s.vcis[r.dst.vci as usize].inbox;
            let data = if len <= CELL_THRESHOLD {
                LocalData::Cell(SmallVec::from_slice(src.as_slice()))
            } else {
                match src {
                    SendSrc::Borrowed(b) if blocking => {
                        let done = ReqInner::new_send();
                        s.vcis[r.src_vci].stats.sender_requests.fetch_add(1, Ordering::Relaxed);
                        inbox.push(Incoming::Local(LocalMsg {
                            env: r.env,
                            data: LocalData::Region {
                                ptr: b.as_ptr(),
                                len,
                                keep: None,
                                done: Some(done.clone()),
                            },
                        }));
                        return Ok(Some((done, r.src_vci)));
                    }
                    SendSrc::Borrowed(b) => region(Bytes::copy_from_slice(b)),
                    SendSrc::Owned(b) => region(b),
                }
            };
            inbox.push(Incoming::Local(LocalMsg { env: r.env, data }));
            return Ok(None);
        }
        let data = match src {
            SendSrc::Borrowed(b) if blocking || len <= s.cfg.eager_limit => SendData::Raw(b.as_ptr(), len),
            SendSrc::Borrowed(b) => SendData::Shared(Bytes::copy_from_slice(b)),
            SendSrc::Owned(b) => SendData::Shared(b),
        };
        let mut g = s.enter(r.src_vci);
        Ok(s.start_send(&mut g, r.dst, r.env, data)?.map(|req| (req, r.src_vci)))
    }

    pub(crate) fn send_blocking(&self, src: SendSrc<'_>, r: SendRoute) -> Result<()> {
        if let Some((req, v)) = self.start_send(src, r, true)? {
            wait_inner(&self.shared, &req, v);
        }
        Ok(())
    }

    pub(crate) fn send_nonblocking(&self, src: SendSrc<'_>, r: SendRoute) -> Result<Request<'_>> {
        Ok(match self.start_send(src, r, false)? {
            Some((req, v)) => Request::p2p(req, &self.shared, v),
            None => Request::done(Status::empty()),
        })
    }

    pub(crate) fn post(&self, t: RecvTarget, vci: usize, pat: Pattern) -> Arc<ReqInner> {
        let req = ReqInner::new_recv(t);
        let s = &*self.shared;
        let mut g = s.enter(vci);
        s.post_recv(&mut g, pat, req.clone());
        req
    }

    fn stream_status(&self) -> bool {
        self.kind == crate::comm::CommKind::StreamMultiplex
    }

    pub(crate) fn recv_blocking(&self, buf: &mut [u8], vci: usize, pat: Pattern) -> Result<Status> {
        self.recv_target_blocking(RecvTarget::bytes(RecvBuf::Raw(buf.as_mut_ptr(), buf.len())), vci, pat)
    }

    fn recv_target_blocking(&self, mut t: RecvTarget, vci: usize, pat: Pattern) -> Result<Status> {
        t.stream_status = self.stream_status();
        let req = self.post(t, vci, pat);
        wait_inner(&self.shared, &req, vci);
        let (st, _) = req.finish();
        match &st.error {
            Some(e) => Err(e.clone()),
            None => Ok(st),
        }
    }

    pub(crate) fn recv_owned(&self, buf: Vec<u8>, vci: usize, pat: Pattern) -> Arc<ReqInner> {
        let mut t = RecvTarget::bytes(RecvBuf::Owned(buf));
        t.stream_status = self.stream_status();
        self.post(t, vci, pat)
    }

    pub(crate) fn is_device(&self) -> bool {
        self.streams
            .first()
            .is_some_and(|s| s.kind() == StreamKind::DeviceQueue)
    }
}

fn region(b: Bytes) -> LocalData {
    LocalData::Region {
        ptr: b.as_ptr(),
        len: b.len(),
        keep: Some(b),
        done: None,
    }
}

fn to_i32(r: usize) -> i32 {
    i32::try_from(r).unwrap_or(i32::MAX)
}

impl Comm {
    fn send_impl(&self, src: SendSrc<'_>, dest: usize, tag: i32, idx: Option<(i32, i32)>) -> Result<()> {
        let c = self.live()?;
        if c.is_device() {
            return crate::offload::send_enqueue_src(self, src, dest, tag);
        }
        let r = c.send_route(to_i32(dest), tag, idx, false)?;
        c.send_blocking(src, r)
    }

    fn recv_impl(&self, t: RecvTarget, src: i32, tag: i32, idx: Option<(i32, i32)>) -> Result<Status> {
        let c = self.live()?;
        if c.is_device() {
            return Err(Error::arg(
                "receives on a device-queue communicator must be enqueued (recv_enqueue)",
            ));
        }
        let (v, pat) = c.recv_route(src, tag, idx, false)?;
        c.recv_target_blocking(t, v, pat)
    }

    fn isend_impl(&self, src: SendSrc<'_>, dest: usize, tag: i32, idx: Option<(i32, i32)>) -> Result<Request<'_>> {
        let c = self.live()?;
        if c.is_device() {
            return Err(Error::arg(
                "nonblocking sends on a device-queue communicator must be enqueued (isend_enqueue)",
            ));
        }
        let r = c.send_route(to_i32(dest), tag, idx, false)?;
        c.send_nonblocking(src, r)
    }

    fn irecv_impl(&self, buf: Vec<u8>, src: i32, tag: i32, idx: Option<(i32, i32)>) -> Result<Request<'_>> {
        let c = self.live()?;
        if c.is_device() {
            return Err(Error::arg(
                "receives on a device-queue communicator must be enqueued (irecv_enqueue)",
            ));
        }
        let (v, pat) = c.recv_route(src, tag, idx, false)?;
        Ok(Request::p2p(c.recv_owned(buf, v, pat), &c.shared, v))
    }

    /// Blocking send of raw bytes.
    ///
    /// On a device-queue stream communicator this is the same operation as
    /// [`Comm::send_enqueue`].
    pub fn send(&self, buf: &[u8], dest: usize, tag: i32) -> Result<()> {
        self.send_impl(SendSrc::Borrowed(buf), dest, tag, None)
    }

    /// Blocking send of `count` elements of `ty` laid out in `buf`.
    pub fn send_typed(&self, buf: &[u8], count: usize, ty: &Datatype, dest: usize, tag: i32) -> Result<()> {
        self.send_impl(packed(buf, count, ty)?, dest, tag, None)
    }

    /// Blocking receive into `buf`. `src` and `tag` may be wildcards.
    pub fn recv(&self, buf: &mut [u8], src: i32, tag: i32) -> Result<Status> {
        self.recv_impl(
            RecvTarget::bytes(RecvBuf::Raw(buf.as_mut_ptr(), buf.len())),
            src,
            tag,
            None,
        )
    }

    /// Blocking receive of up to `count` elements of `ty` into `buf`.
    pub fn recv_typed(&self, buf: &mut [u8], count: usize, ty: &Datatype, src: i32, tag: i32) -> Result<Status> {
        let t = RecvTarget::typed(RecvBuf::Raw(buf.as_mut_ptr(), buf.len()), count as u64, ty)?;
        self.recv_impl(t, src, tag, None)
    }

    /// Nonblocking send. Small messages complete immediately; larger ones
    /// are copied so `buf` can be reused at once.
    pub fn isend(&self, buf: &[u8], dest: usize, tag: i32) -> Result<Request<'_>> {
        self.isend_impl(SendSrc::Borrowed(buf), dest, tag, None)
    }

    /// Nonblocking send that takes ownership of the payload (no copy).
    pub fn isend_owned(&self, data: Bytes, dest: usize, tag: i32) -> Result<Request<'_>> {
        self.isend_impl(SendSrc::Owned(data), dest, tag, None)
    }

    /// Nonblocking receive into `buf`; get it back with
    /// [`Request::take_buffer`] after completion.
    pub fn irecv(&self, buf: Vec<u8>, src: i32, tag: i32) -> Result<Request<'_>> {
        self.irecv_impl(buf, src, tag, None)
    }

    /// Blocking send from local stream `src_idx` to stream `dst_idx` of
    /// `dest` on a multiplex communicator.
    pub fn stream_send(&self, buf: &[u8], dest: usize, tag: i32, src_idx: usize, dst_idx: usize) -> Result<()> {
        self.multiplex()?;
        self.send_impl(
            SendSrc::Borrowed(buf),
            dest,
            tag,
            Some((to_i32(src_idx), to_i32(dst_idx))),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stream_send_typed(
        &self,
        buf: &[u8],
        count: usize,
        ty: &Datatype,
        dest: usize,
        tag: i32,
        src_idx: usize,
        dst_idx: usize,
    ) -> Result<()> {
        self.multiplex()?;
        self.send_impl(
            packed(buf, count, ty)?,
            dest,
            tag,
            Some((to_i32(src_idx), to_i32(dst_idx))),
        )
    }

    pub fn stream_isend(
        &self,
        buf: &[u8],
        dest: usize,
        tag: i32,
        src_idx: usize,
        dst_idx: usize,
    ) -> Result<Request<'_>> {
        self.multiplex()?;
        self.isend_impl(
            SendSrc::Borrowed(buf),
            dest,
            tag,
            Some((to_i32(src_idx), to_i32(dst_idx))),
        )
    }

    /// Blocking receive on local stream `dst_idx`. `src_idx` may be
    /// [`crate::comm::ANY_STREAM`]; the status then reports the sender's index.
    pub fn stream_recv(&self, buf: &mut [u8], src: i32, tag: i32, src_idx: i32, dst_idx: usize) -> Result<Status> {
        self.multiplex()?;
        let t = RecvTarget::bytes(RecvBuf::Raw(buf.as_mut_ptr(), buf.len()));
        self.recv_impl(t, src, tag, Some((src_idx, to_i32(dst_idx))))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stream_recv_typed(
        &self,
        buf: &mut [u8],
        count: usize,
        ty: &Datatype,
        src: i32,
        tag: i32,
        src_idx: i32,
        dst_idx: usize,
    ) -> Result<Status> {
        self.multiplex()?;
        let t = RecvTarget::typed(RecvBuf::Raw(buf.as_mut_ptr(), buf.len()), count as u64, ty)?;
        self.recv_impl(t, src, tag, Some((src_idx, to_i32(dst_idx))))
    }

    pub fn stream_irecv(&self, buf: Vec<u8>, src: i32, tag: i32, src_idx: i32, dst_idx: usize) -> Result<Request<'_>> {
        self.multiplex()?;
        self.irecv_impl(buf, src, tag, Some((src_idx, to_i32(dst_idx))))
    }

    fn multiplex(&self) -> Result<()> {
        match self.inner.kind {
            crate::comm::CommKind::StreamMultiplex => Ok(()),
            k => Err(Error::arg(format!(
                "stream-indexed operations need a multiplex stream communicator, not {k:?}"
            ))),
        }
    }
}
